//! Wall-clock microbenchmarks of attention layers and blocks.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionLayer, Variant};
use crate::error::{Error, Result};
use crate::model::{Block, ModelConfig};
use crate::tensor::{ParamStore, Precision, Real, Session, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub component: String,
    pub variant: Variant,
    pub pass: &'static str,
    pub repeat: usize,
    pub mean_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub preset: String,
    pub tokens: (usize, usize),
    pub repeat: usize,
    pub seed: u64,
    pub precision: Precision,
}

pub const CSV_HEADER: &str = "preset,tokens,precision,component,variant,pass,repeat,mean_us,min_us,max_us";

fn time(repeat: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, f64)> {
    f()?;
    let mut samples = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let mean = samples.iter().sum::<f64>() / repeat as f64;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(0.0, f64::max);
    Ok((mean, min, max))
}

fn run<T: Real>(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let cfg = ModelConfig::preset(&opts.preset)?;
    let (h, w) = opts.tokens;
    let c = cfg.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = Tensor::<T>::randn([h * w, c], 1.0, &mut rng);
    let mut rows = Vec::new();
    let mut record = |component: &str, variant, pass, (mean_us, min_us, max_us)| {
        rows.push(BenchRow { component: component.into(), variant, pass, repeat: opts.repeat, mean_us, min_us, max_us });
    };

    for variant in Variant::ALL {
        let mut store = ParamStore::<T>::new();
        let acfg = crate::attention::AttentionConfig { variant, ..cfg.attention(0)? };
        let layer = AttentionLayer::new(&mut store, "attn", acfg, &mut rng)?;
        let forward = |training| -> Result<()> {
            let mut s = Session::new(&store, training);
            let xv = s.graph.leaf(x.clone());
            let y = layer.forward(&mut s, xv, (h, w))?;
            if training {
                let l = s.graph.sum(y);
                s.graph.backward(l)?;
            }
            Ok(())
        };
        record("attention", variant, "forward", time(opts.repeat, || forward(false))?);
        record("attention", variant, "forward+backward", time(opts.repeat, || forward(true))?);
    }

    let mut store = ParamStore::<T>::new();
    let pcm = (cfg.arch == crate::model::Arch::Vitae).then_some(cfg.pcm_groups);
    let acfg = crate::attention::AttentionConfig { variant: cfg.variant, ..cfg.attention(0)? };
    let block = Block::new(&mut store, "block", acfg, cfg.ffn_ratio, pcm, &mut rng)?;
    if let Some(p) = &block.pcm {
        p.pad_kernels(&mut store)?;
    }
    let forward = |training| -> Result<()> {
        let mut s = Session::new(&store, training);
        let xv = s.graph.leaf(x.clone());
        let y = block.forward(&mut s, xv, Some((h, w)))?;
        if training {
            let l = s.graph.sum(y);
            s.graph.backward(l)?;
        }
        Ok(())
    };
    record("block", cfg.variant, "forward", time(opts.repeat, || forward(false))?);
    record("block", cfg.variant, "forward+backward", time(opts.repeat, || forward(true))?);
    Ok(rows)
}

pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.repeat == 0 {
        return Err(Error::config("--repeat must be positive"));
    }
    if opts.tokens.0 == 0 || opts.tokens.1 == 0 {
        return Err(Error::config("token grid must be non-empty"));
    }
    match opts.precision {
        Precision::F64 => run::<f64>(opts),
        Precision::F32 => run::<f32>(opts),
    }
}

pub fn bench_csv(opts: &BenchOptions, rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{}x{},{},{},{},{},{},{:.1},{:.1},{:.1}\n",
            opts.preset,
            opts.tokens.0,
            opts.tokens.1,
            opts.precision.bits(),
            r.component,
            r.variant,
            r.pass,
            r.repeat,
            r.mean_us,
            r.min_us,
            r.max_us
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_rows_cover_every_variant() {
        let opts = BenchOptions { preset: "desk".into(), tokens: (9, 9), repeat: 1, seed: 0, precision: Precision::F32 };
        let rows = run_bench(&opts).unwrap();
        assert_eq!(rows.len(), 2 * Variant::ALL.len() + 2);
        let csv = bench_csv(&opts, &rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn zero_repeat_rejected() {
        let opts = BenchOptions { preset: "desk".into(), tokens: (9, 9), repeat: 0, seed: 0, precision: Precision::F64 };
        assert!(matches!(run_bench(&opts), Err(Error::Config(_))));
    }
}
