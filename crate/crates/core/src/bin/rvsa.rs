use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rvsa::analysis::{
    bench_csv, export_layer_geometry, gradcheck_module, load_train_config, model_cost, run_bench, run_pretrain, run_suite,
    BenchOptions, Fault, ModuleCheck, SuiteOptions, VizOptions, MODULES,
};
use rvsa::attention::Variant;
use rvsa::model::ModelConfig;
use rvsa::tensor::Precision;

#[derive(Parser)]
#[command(name = "rvsa", version, about = "Varied-size window attention: checks, costs, benchmarks and geometry export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    SamplingWeights,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suite and print a JSON report
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64, value_parser = parse_precision_bits)]
        precision: u32,
        /// Also write the report to this file
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
    /// Analytic operation count of a preset
    Flops {
        #[arg(long)]
        preset: String,
        /// Token grid as HxW
        #[arg(long, value_parser = parse_grid)]
        tokens: (usize, usize),
        #[arg(long)]
        variant: Variant,
        #[arg(long, value_enum, default_value = "csv")]
        format: CostFormat,
    },
    /// Wall-clock microbenchmark of attention layers and one block, as CSV
    Bench {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        repeat: usize,
        #[arg(long, value_parser = parse_grid, default_value = "14x14")]
        tokens: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32, value_parser = parse_precision_bits)]
        precision: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the windows one layer generates for an image (CSV + SVG)
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        /// PGM or PPM image
        #[arg(long)]
        image: PathBuf,
        /// Block index, starting at 1
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Masked-image pretraining of a small model
    PretrainToy {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient check of one module, or `all`
    Gradcheck {
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64, value_parser = parse_precision_bits)]
        precision: u32,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn parse_precision_bits(s: &str) -> Result<u32, String> {
    let bits = s.parse().map_err(|_| format!("expected 32 or 64, got `{s}`"))?;
    Precision::from_bits(bits).map(|p| p.bits()).map_err(|e| e.to_string())
}

fn precision(bits: u32) -> Precision {
    Precision::from_bits(bits).expect("validated by the parser")
}

fn print_gradcheck(r: &ModuleCheck) {
    println!(
        "{:<18} {}  max rel err {:.3e}  tol {:.0e}",
        r.module,
        if r.passed() { "PASS" } else { "FAIL" },
        r.max_rel_error(),
        r.tolerance
    );
    for t in &r.tensors {
        println!("    {:<40} {:.3e}  checked {} skipped {}", t.tensor, t.max_rel_error, t.checked, t.skipped);
    }
}

fn run(cli: Cli) -> rvsa::Result<bool> {
    match cli.command {
        Command::Verify { seed, precision: bits, report, inject_fault } => {
            let opts = SuiteOptions {
                seed,
                precision: precision(bits),
                fault: inject_fault.map(|InjectedFault::SamplingWeights| Fault::SamplingWeights),
            };
            let r = run_suite(&opts);
            let json = r.to_json();
            if let Some(path) = report {
                fs::write(path, &json)?;
            }
            print!("{json}");
            for f in r.failures() {
                eprintln!("FAILED {}: {}", f.name, f.detail);
            }
            Ok(r.passed)
        }
        Command::Flops { preset, tokens, variant, format } => {
            let cfg = ModelConfig { variant, ..ModelConfig::preset(&preset)? };
            let report = model_cost(&cfg, tokens)?;
            match format {
                CostFormat::Csv => print!("{}", report.to_csv()),
                CostFormat::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
            Ok(true)
        }
        Command::Bench { preset, repeat, tokens, seed, precision: bits, out } => {
            let opts = BenchOptions { preset, tokens, repeat, seed, precision: precision(bits) };
            let csv = bench_csv(&opts, &run_bench(&opts)?);
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Viz { ckpt, image, layer, head, out } => {
            let files = export_layer_geometry(&ckpt, &image, &VizOptions { layer, head, out_dir: out })?;
            for f in files {
                println!("{} {} windows, {} records -> {} {}", f.stream.tag(), f.windows, f.records, f.csv.display(), f.svg.display());
            }
            Ok(true)
        }
        Command::PretrainToy { config, seed } => {
            let mut cfg = load_train_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let s = run_pretrain(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            Ok(true)
        }
        Command::Gradcheck { module, seed, precision: bits } => {
            let names: Vec<&str> = if module == "all" { MODULES.to_vec() } else { vec![module.as_str()] };
            let mut ok = true;
            for name in names {
                let r = match precision(bits) {
                    Precision::F64 => gradcheck_module::<f64>(name, seed)?,
                    Precision::F32 => gradcheck_module::<f32>(name, seed)?,
                };
                print_gradcheck(&r);
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
