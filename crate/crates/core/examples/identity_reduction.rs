//! Varied-size window layers with zero transform heads are fixed-window
//! attention; non-zero heads move the windows and change the output.
//!
//! cargo run --release --example identity_reduction -- [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvsa::attention::{attend, AttentionConfig, AttentionLayer, Variant};
use rvsa::tensor::{ParamStore, Tensor};

fn main() -> rvsa::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn([32, 17, 23], 1.0, &mut rng);

    for variant in [Variant::Vsa, Variant::Rvsa, Variant::RvsaDecoupled] {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "attn", AttentionConfig::new(32, 4, 7, variant)?, &mut rng)?;
        let window = AttentionLayer {
            cfg: AttentionConfig { variant: Variant::Window, ..layer.cfg },
            transform: Vec::new(),
            ..layer.clone()
        };
        let reference = attend(&x, &window, &store)?;
        let same = attend(&x, &layer, &store)? == reference;

        for head in &layer.transform {
            let shape = store.get(head.bias).shape().to_vec();
            *store.get_mut(head.bias) = Tensor::randn(shape, 0.5, &mut rng);
        }
        let moved = attend(&x, &layer, &store)?.max_abs_diff(&reference).unwrap_or(f64::NAN);
        println!("{:<8} zero heads bitwise equal to window: {same:<5}  after random head bias, max diff {moved:.3e}", variant.to_string());
    }
    Ok(())
}
