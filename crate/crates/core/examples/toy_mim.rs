//! Masked image modeling on synthetic striped images.
//!
//! cargo run --release --example toy_mim -- [steps] [seed]

use rvsa::mim::{pretrain, random_mask, TrainConfig};

fn main() -> rvsa::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(Ok(200), |s| s.parse()).expect("steps must be an integer");
    let seed = args.next().map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");

    let plan = random_mask(196, 0.75, seed)?;
    println!("196 tokens at ratio 0.75: {} masked, {} visible", plan.masked_ids.len(), plan.visible_ids.len());

    let lr = args.next().map_or(Ok(TrainConfig::default().lr), |s| s.parse()).expect("lr must be a number");
    let cfg = TrainConfig { steps, seed, lr, ..TrainConfig::default() };
    let run = pretrain(&cfg)?;
    for (i, l) in run.losses.iter().enumerate().filter(|(i, _)| i % 20 == 0 || *i + 1 == steps) {
        println!("step {i:4}  loss {l:.4}");
    }
    if let (Some(first), Some(last)) = (run.losses.first(), run.losses.last()) {
        println!("final/initial = {:.3}", last / first);
    }
    Ok(())
}
