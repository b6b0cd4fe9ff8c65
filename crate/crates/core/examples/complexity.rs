//! Analytic cost of window attention and of the learned-window extras.
//!
//! cargo run --release --example complexity

use rvsa::analysis::{extra_ratio, model_cost, window_attention_flops};
use rvsa::attention::Variant;
use rvsa::model::ModelConfig;

fn main() -> rvsa::Result<()> {
    let core = window_attention_flops(14, 14, 16, 7)?;
    println!("window core term, 14x14x16 with s=7: {} (projections {})", core.core, core.projections);

    println!("\nextra / core for h=12 heads:");
    for s in [4, 7, 11, 14] {
        let r = extra_ratio(s, 12)?;
        println!("  s={s:<3} {r:>12} = {:.5}", *r.numer() as f64 / *r.denom() as f64);
    }

    println!("\nbase ViT on 64x64 tokens:");
    for variant in Variant::ALL {
        let report = model_cost(&ModelConfig { variant, ..ModelConfig::vit_base() }, (64, 64))?;
        println!(
            "  {:<8} {:>8.2} GFLOPs  (extras {:>6.3} G)  {:>6.2} M params",
            variant.to_string(),
            report.total_flops as f64 * 1e-9,
            report.extra_flops() as f64 * 1e-9,
            report.total_params as f64 * 1e-6
        );
    }
    Ok(())
}
