//! Self-contained verification suite: every invariant that can be checked
//! without data, reported as deterministic JSON.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cost::{extra_ratio, model_cost};
use super::gradcheck::{gradcheck_module, ModuleCheck};
use crate::attention::{attend, AttentionConfig, AttentionLayer, Variant};
use crate::error::Result;
use crate::geometry::sampling::sample_with_bias;
use crate::geometry::{transform_grid, SampleGrid, WindowGrid, WindowParams, WindowTransform};
use crate::mim::{mask_count, random_mask, AdamW};
use crate::model::{build_model, pad_pcm_kernel, Arch, ModelConfig};
use crate::tensor::{Graph, ParamStore, Precision, Session, Tensor};

/// Window sizes exercised by the identity-reduction check.
pub const IDENTITY_WINDOW_SIZES: [usize; 4] = [4, 7, 11, 14];

/// Deliberate defects used to confirm that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// adds a constant to every bilinear corner weight
    SamplingWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// precision of the primitive gradient checks; all other checks run in 64-bit
    pub precision: Precision,
    pub fault: Option<Fault>,
}

impl SuiteOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, precision: Precision::F64, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub precision: u32,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Gradient checks that run at the requested precision.
pub const PRIMITIVE_CHECKS: [&str; 17] = [
    "add",
    "mul",
    "matmul",
    "bmm",
    "transpose",
    "softmax",
    "leaky_relu",
    "silu",
    "gelu",
    "layer_norm",
    "batch_norm",
    "batch_norm_fixed",
    "conv2d",
    "gather",
    "mean_axis",
    "transform_grid",
    "bilinear",
];

/// Gradient checks of composite modules, always 64-bit.
pub const MODULE_CHECKS: [&str; 6] = ["attention", "block", "vitae_cell", "model_small", "model_vitae_small", "mim"];

fn outcome(name: &str, passed: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome { name: name.into(), passed, detail: detail.into() }
}

fn failed(name: &str, err: crate::Error) -> CheckOutcome {
    outcome(name, false, format!("error: {err}"))
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

/// Zero transform heads reduce VSA, RVSA and RVSA-kv layers bitwise to
/// window attention: 5 inputs per window size, 20 per variant.
pub fn identity_reduction(rng: &mut impl Rng) -> Result<(bool, usize)> {
    let mut compared = 0;
    for s in IDENTITY_WINDOW_SIZES {
        for _ in 0..5 {
            let (h, w) = (rng.gen_range(s..=2 * s + 3), rng.gen_range(s..=2 * s + 3));
            let x = Tensor::<f64>::randn([16, h, w], 1.0, rng);
            for variant in [Variant::Vsa, Variant::Rvsa, Variant::RvsaDecoupled] {
                let mut store = ParamStore::new();
                let layer = AttentionLayer::new(&mut store, "a", AttentionConfig::new(16, 4, s, variant)?, rng)?;
                let window = AttentionLayer {
                    cfg: AttentionConfig { variant: Variant::Window, ..layer.cfg },
                    transform: Vec::new(),
                    ..layer.clone()
                };
                if attend(&x, &layer, &store)? != attend(&x, &window, &store)? {
                    return Ok((false, compared));
                }
                compared += 1;
            }
        }
    }
    Ok((true, compared))
}

/// With one window covering the whole map, window and full attention agree.
fn single_window_is_full(rng: &mut impl Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in [3, 5, 7] {
        let mut store = ParamStore::new();
        let full = AttentionLayer::new(&mut store, "a", AttentionConfig::new(8, 2, s, Variant::Full)?, rng)?;
        let window = AttentionLayer { cfg: AttentionConfig { variant: Variant::Window, ..full.cfg }, ..full.clone() };
        let x = Tensor::<f64>::randn([8, s, s], 1.0, rng);
        let d = attend(&x, &full, &store)?.max_abs_diff(&attend(&x, &window, &store)?).unwrap_or(f64::INFINITY);
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Rotating every window by `θ` and the result by `-θ` restores the lattice.
fn rotation_round_trip(rng: &mut impl Rng) -> Result<f64> {
    let grid = WindowGrid::partition(15, 11, 5)?;
    let heads = 3;
    let mut t = WindowTransform::identity(grid.num_windows(), heads);
    for p in &mut t.params {
        p.theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    }
    let sampled = transform_grid(&grid, &t)?;
    let (centers, rel) = (grid.centers(), grid.relative_offsets());
    let mut worst = 0.0f64;
    for wi in 0..grid.num_windows() {
        for hi in 0..heads {
            let back = WindowParams { theta: -t.get(wi, hi).theta, ..WindowParams::IDENTITY };
            for (pi, &r) in rel.iter().enumerate() {
                let (x, y) = sampled.get(wi, hi, pi);
                let (bx, by) = back.apply((x - centers[wi].0, y - centers[wi].1));
                worst = worst.max((bx - r.0).abs()).max((by - r.1).abs());
            }
        }
    }
    Ok(worst)
}

fn quarter_turn() -> f64 {
    let p = WindowParams { theta: std::f64::consts::FRAC_PI_2, ..WindowParams::IDENTITY };
    let (x, y) = p.apply((3.0, 3.0));
    (x - 3.0).abs().max((y + 3.0).abs())
}

/// Bilinear value at `(x, y)` as a sum of tent functions over every pixel.
pub fn tent_oracle(feature: &Tensor<f64>, (x, y): (f64, f64)) -> Vec<f64> {
    let s = feature.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; c];
    for i in 0..h {
        let wy = tent(y - i as f64);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = tent(x - j as f64);
            if wx == 0.0 {
                continue;
            }
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wy * wx * feature.data()[(ch * h + i) * w + j];
            }
        }
    }
    out
}

/// Largest deviation of the sampler from [`tent_oracle`] on `n` random
/// coordinates, a quarter of them off the map, and how many landed outside.
pub fn sampling_oracle_error(rng: &mut impl Rng, n: usize, fault: Option<Fault>) -> Result<(f64, usize)> {
    let (c, h, w) = (3, 9, 13);
    let feature = Tensor::<f64>::randn([c, h, w], 1.0, rng);
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            if i % 4 == 3 {
                (rng.gen_range(-4.0..w as f64 + 3.0), rng.gen_range(-4.0..h as f64 + 3.0))
            } else {
                (rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64))
            }
        })
        .collect();
    let outside = coords
        .iter()
        .filter(|&&(x, y)| x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64)
        .count();
    let grid = SampleGrid { windows: 1, heads: 1, points: n, coords: coords.clone() };
    let bias = if fault == Some(Fault::SamplingWeights) { 1e-3 } else { 0.0 };
    let got = sample_with_bias(&feature, &grid, bias)?;
    let mut worst = 0.0f64;
    for (p, &xy) in coords.iter().enumerate() {
        for (a, b) in tent_oracle(&feature, xy).iter().zip(&got.data()[p * c..(p + 1) * c]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst, outside))
}

/// 3×3 kernels grown from 1×1 ones give bitwise identical convolutions.
pub fn pcm_padding_equivalence(rng: &mut impl Rng, inputs: usize) -> Result<bool> {
    for _ in 0..inputs {
        let (c, groups) = (8, rng.gen_range(1..=2) * 2);
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let k1 = Tensor::<f64>::randn([c, c / groups, 1, 1], 1.0, rng);
        let k3 = pad_pcm_kernel(&k1)?;
        let x = Tensor::<f64>::randn([c, h, w], 1.0, rng);
        let mut g = Graph::new();
        let (xv, a, b) = (g.leaf(x), g.leaf(k1), g.leaf(k3));
        let one = g.conv2d(xv, a, groups, 0)?;
        let three = g.conv2d(xv, b, groups, 1)?;
        if g.value(one) != g.value(three) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One optimizer step on a finetuned ViTAE model with a non-zero loss;
/// returns how many ring entries of the convolution kernels moved off zero.
pub fn alpha_after_one_step(rng: &mut impl Rng) -> Result<(f64, usize)> {
    let cfg = ModelConfig { arch: Arch::Vitae, embed_dim: 16, heads: 2, pcm_groups: 4, window_size: 3, num_classes: 3, ..ModelConfig::desk() };
    let mut store = ParamStore::new();
    let mut model = build_model(&cfg, &mut store, rng)?;
    model.finetune(&mut store)?;
    let img = Tensor::<f64>::randn([3, 24, 24], 1.0, rng);
    let target = Tensor::<f64>::randn([3], 1.0, rng);
    let (loss, grads) = {
        let mut s = Session::new(&store, true);
        let x = s.graph.leaf(img);
        let logits = model.forward(&mut s, x)?.logits.expect("classifier configured");
        let t = s.graph.leaf(target);
        let d = s.graph.sub(logits, t)?;
        let sq = s.graph.mul(d, d)?;
        let loss = s.graph.mean(sq);
        let grads = s.graph.backward(loss)?;
        (s.graph.value(loss).item()?, s.param_grads(&grads))
    };
    AdamW::new(1e-3, 0.05).step(&mut store, &grads);
    let mut nonzero = 0;
    for pcm in model.blocks.iter().filter_map(|b| b.pcm.as_ref()) {
        for id in [pcm.conv1, pcm.conv2] {
            nonzero += store.get(id).data().iter().enumerate().filter(|&(i, v)| i % 9 != 4 && *v != 0.0).count();
        }
    }
    Ok((loss, nonzero))
}

fn mask_partition(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, n) in [196usize, 64, 49, 16, 10].into_iter().enumerate() {
        let plan = random_mask(n, 0.75, seed.wrapping_add(i as u64))?;
        let mut seen = vec![0u8; n];
        for &t in plan.visible_ids.iter().chain(&plan.masked_ids) {
            seen[t] += 1;
        }
        ok &= seen.iter().all(|&c| c == 1) && plan.masked_ids.len() == mask_count(n, 0.75);
        if n == 196 {
            ok &= plan.masked_ids.len() == 147 && plan.visible_ids.len() == 49;
        }
        parts.push(format!("{n}->{}/{}", plan.masked_ids.len(), plan.visible_ids.len()));
    }
    Ok((ok, parts.join(" ")))
}

fn variant_ordering() -> Result<(bool, String)> {
    let at = |v| model_cost(&ModelConfig { variant: v, ..ModelConfig::vit_base() }, (64, 64));
    let (full, window, vsa, rvsa) = (at(Variant::Full)?, at(Variant::Window)?, at(Variant::Vsa)?, at(Variant::Rvsa)?);
    let ok = full.total_flops > window.total_flops
        && window.total_flops >= vsa.core_flops()
        && window.total_flops + rvsa.extra_flops() == rvsa.total_flops;
    Ok((ok, format!("full {} window {} vsa-core {} rvsa {}", full.total_flops, window.total_flops, vsa.core_flops(), rvsa.total_flops)))
}

fn gradcheck_detail(r: &ModuleCheck) -> String {
    let checked: usize = r.tensors.iter().map(|t| t.checked).sum();
    format!("max rel err {} over {checked} coordinates (tol {})", sci(r.max_rel_error()), sci(r.tolerance))
}

/// Runs every check; failures are reported, never returned as errors.
pub fn run_suite(opts: &SuiteOptions) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, r: Result<CheckOutcome>| checks.push(r.unwrap_or_else(|e| failed(name, e)));

    push(
        "identity_reduction",
        identity_reduction(&mut rng).map(|(ok, n)| outcome("identity_reduction", ok, format!("{n} bitwise comparisons"))),
    );
    push(
        "single_window_full",
        single_window_is_full(&mut rng).map(|d| outcome("single_window_full", d <= 1e-12, format!("max abs diff {}", sci(d)))),
    );
    push(
        "rotation_round_trip",
        rotation_round_trip(&mut rng).map(|d| outcome("rotation_round_trip", d <= 1e-12, format!("max abs err {}", sci(d)))),
    );
    let d = quarter_turn();
    push("quarter_turn", Ok(outcome("quarter_turn", d <= 1e-12, format!("(3,3) -> (3,-3) within {}", sci(d)))));
    push(
        "sampling_oracle",
        sampling_oracle_error(&mut rng, 10_000, opts.fault).map(|(d, out)| {
            outcome("sampling_oracle", d <= 1e-12, format!("max abs err {} on 10000 points, {out} outside", sci(d)))
        }),
    );
    let gseed = rng.gen::<u64>();
    for name in PRIMITIVE_CHECKS {
        let label = format!("gradcheck_{name}");
        let r = match opts.precision {
            Precision::F64 => gradcheck_module::<f64>(name, gseed),
            Precision::F32 => gradcheck_module::<f32>(name, gseed),
        };
        push(&label, r.map(|r| outcome(&label, r.passed(), gradcheck_detail(&r))));
    }
    for name in MODULE_CHECKS {
        let label = format!("gradcheck_{name}");
        push(&label, gradcheck_module::<f64>(name, gseed).map(|r| outcome(&label, r.passed(), gradcheck_detail(&r))));
    }
    push(
        "pcm_padding",
        pcm_padding_equivalence(&mut rng, 50).map(|ok| outcome("pcm_padding", ok, "50 inputs, 3x3 vs 1x1 bitwise")),
    );
    push(
        "pcm_alpha_reachable",
        alpha_after_one_step(&mut rng).map(|(loss, n)| {
            outcome("pcm_alpha_reachable", loss > 0.0 && n > 0, format!("loss {}, {n} ring entries non-zero", sci(loss)))
        }),
    );
    let mseed = rng.gen::<u64>();
    push("mask_partition", mask_partition(mseed).map(|(ok, d)| outcome("mask_partition", ok, d)));
    push(
        "complexity_ratio",
        extra_ratio(7, 12).map(|r| outcome("complexity_ratio", r == Ratio::new(545, 4802), format!("extra/core at s=7, h=12 = {r}"))),
    );
    push("variant_ordering", variant_ordering().map(|(ok, d)| outcome("variant_ordering", ok, d)));
    push(
        "window_count",
        WindowGrid::partition(64, 64, 7).map(|g| {
            outcome(
                "window_count",
                g.num_windows() == 100 && g.pad_h == 6 && g.pad_w == 6,
                format!("{} windows, pad {}x{}", g.num_windows(), g.pad_h, g.pad_w),
            )
        }),
    );

    VerifyReport { seed: opts.seed, precision: opts.precision.bits(), passed: checks.iter().all(|c| c.passed), checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tent_oracle_matches_hand_values() {
        let f = Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tent_oracle(&f, (0.5, 0.5)), vec![1.5]);
        assert_eq!(tent_oracle(&f, (1.5, 0.0)), vec![0.5]);
        assert_eq!(tent_oracle(&f, (-1.0, 0.0)), vec![0.0]);
    }

    #[test]
    fn injected_sampling_fault_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (clean, outside) = sampling_oracle_error(&mut rng, 500, None).unwrap();
        assert!(clean <= 1e-12 && outside > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sampling_oracle_error(&mut rng, 500, Some(Fault::SamplingWeights)).unwrap().0 > 1e-6);
    }

    #[test]
    fn quarter_turn_is_exact_enough() {
        assert!(quarter_turn() <= 1e-12);
    }
}
