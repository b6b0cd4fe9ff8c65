//! Finite-difference check of tape operations and modules.
//!
//! cargo run --release --example gradcheck -- [module ...] [--f32] [--seed N]

use rvsa::analysis::{gradcheck_module, ModuleCheck, MODULES};

fn main() -> rvsa::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let f32 = args.iter().any(|a| a == "--f32");
    let seed = match args.iter().position(|a| a == "--seed") {
        Some(i) => args.get(i + 1).and_then(|s| s.parse().ok()).unwrap_or(0),
        None => 0,
    };
    let mut names: Vec<&str> = args.iter().filter(|a| !a.starts_with("--")).map(String::as_str).filter(|a| a.parse::<u64>().is_err()).collect();
    if names.is_empty() {
        names = MODULES.iter().copied().filter(|m| *m != "model").collect();
    }
    let mut failed = 0;
    for name in names {
        let t = std::time::Instant::now();
        let r: ModuleCheck = if f32 { gradcheck_module::<f32>(name, seed)? } else { gradcheck_module::<f64>(name, seed)? };
        println!(
            "{:<18} {} max rel err {:.2e} (tol {:.0e}, {} tensors, {:.1}s)",
            r.module,
            if r.passed() { "ok  " } else { "FAIL" },
            r.max_rel_error(),
            r.tolerance,
            r.tensors.len(),
            t.elapsed().as_secs_f64()
        );
        if !r.passed() {
            failed += 1;
            for t in r.tensors.iter().filter(|t| t.max_rel_error >= r.tolerance) {
                println!("    {} {:.2e} ({} checked, {} skipped)", t.tensor, t.max_rel_error, t.checked, t.skipped);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
