//! Growing pretrained 1x1 convolution kernels into 3x3 ones with a zero
//! ring keeps the network function; training then moves the ring.
//!
//! cargo run --release --example pcm_kernel_padding

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvsa::analysis::verify::{alpha_after_one_step, pcm_padding_equivalence};
use rvsa::model::{build_model, ModelConfig};
use rvsa::tensor::{ParamStore, Tensor};

fn main() -> rvsa::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ModelConfig::desk_vitae();
    let mut store = ParamStore::new();
    let mut model = build_model(&cfg, &mut store, &mut rng)?;
    let img = Tensor::<f64>::randn([3, 64, 64], 1.0, &mut rng);

    let before = model.features(&img, &store)?;
    model.finetune(&mut store)?;
    let after = model.features(&img, &store)?;
    let kernel = store.get(model.blocks[0].pcm.as_ref().expect("ViTAE block").conv1).shape().to_vec();
    println!("kernel shape after padding: {kernel:?}");
    println!("features unchanged by padding: {}", before == after);

    println!("50 random convolutions, 1x1 vs padded 3x3 bitwise: {}", pcm_padding_equivalence(&mut rng, 50)?);
    let (loss, moved) = alpha_after_one_step(&mut rng)?;
    println!("one optimizer step at loss {loss:.4}: {moved} ring entries moved off zero");
    Ok(())
}
