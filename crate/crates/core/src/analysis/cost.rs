//! Analytic operation counts.
//!
//! Report totals count one multiply as 1 and one add as 1, so a
//! multiply-accumulate costs 2. The window-attention core term
//! `2·s²·H·W·C` counts multiply-accumulates of the two window products
//! (`Q·Kᵀ` and `A·V`); reports convert it to flops by doubling.

use num_rational::Ratio;
use serde::Serialize;

use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::geometry::transform::PARAMS_PER_HEAD;
use crate::geometry::WindowGrid;
use crate::model::{Arch, ModelConfig};

pub const CONVENTION: &str = "flops: multiply = 1, add = 1 (multiply-accumulate = 2)";

const LN_PER_ELEM: u128 = 8;
const GELU_PER_ELEM: u128 = 8;
const SILU_PER_ELEM: u128 = 4;
const BN_PER_ELEM: u128 = 4;
/// scaling, exponent, normalization
const SOFTMAX_PER_LOGIT: u128 = 4;
const BYTES_PER_VALUE: u128 = 8;

fn positive(dims: &[(&str, usize)]) -> Result<()> {
    if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
        return Err(Error::config(format!("{name} must be positive")));
    }
    Ok(())
}

/// Window attention on an `H×W×C` map with `s×s` windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowAttentionCost {
    /// `2·s²·H·W·C`: both window-local products
    pub core: u128,
    /// `4·H·W·C²`: query, key, value and output projections, same unit as `core`
    pub projections: u128,
}

pub fn window_attention_flops(h: usize, w: usize, c: usize, s: usize) -> Result<WindowAttentionCost> {
    positive(&[("H", h), ("W", w), ("C", c), ("s", s)])?;
    let (h, w, c, s) = (h as u128, w as u128, c as u128, s as u128);
    Ok(WindowAttentionCost { core: 2 * s * s * h * w * c, projections: 4 * h * w * c * c })
}

/// Extra work of learned windows over fixed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtraCost {
    /// window average pooling, `H·W·C`
    pub pooling: Ratio<u128>,
    /// transform prediction, `25·h·H·W·C/s²` per prediction head
    pub prediction: Ratio<u128>,
    /// bilinear key/value sampling, `4·H·W·C`
    pub sampling: Ratio<u128>,
}

impl ExtraCost {
    pub fn total(&self) -> Ratio<u128> {
        self.pooling + self.prediction + self.sampling
    }
}

/// `5·H·W·C·(1 + 5h/s²)` for one transform head.
pub fn rvsa_extra_flops(h: usize, w: usize, c: usize, s: usize, heads: usize) -> Result<ExtraCost> {
    transform_extra(h, w, c, s, heads, 1)
}

fn transform_extra(h: usize, w: usize, c: usize, s: usize, heads: usize, predictors: usize) -> Result<ExtraCost> {
    positive(&[("H", h), ("W", w), ("C", c), ("s", s)])?;
    let hwc = (h * w * c) as u128;
    let p = PARAMS_PER_HEAD as u128;
    let s2 = (s * s) as u128;
    Ok(ExtraCost {
        pooling: Ratio::from_integer(hwc),
        prediction: Ratio::new(p * p * heads as u128 * predictors as u128 * hwc, s2),
        sampling: Ratio::from_integer(4 * hwc),
    })
}

/// `extra / core` for the given window size and head count.
pub fn extra_ratio(s: usize, heads: usize) -> Result<Ratio<u128>> {
    let core = window_attention_flops(1, 1, 1, s)?.core;
    Ok(rvsa_extra_flops(1, 1, 1, s, heads)?.total() / Ratio::from_integer(core))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub flops: u128,
    /// part of `flops` spent on learned windows
    pub extra_flops: u128,
    pub params: u128,
    pub live_bytes: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub convention: String,
    pub tokens: (usize, usize),
    pub variant: Variant,
    pub layers: Vec<LayerCost>,
    pub total_flops: u128,
    pub total_params: u128,
    /// largest per-layer live-value estimate
    pub peak_bytes: u128,
}

impl CostReport {
    pub fn extra_flops(&self) -> u128 {
        self.layers.iter().map(|l| l.extra_flops).sum()
    }

    /// Total without the learned-window extras.
    pub fn core_flops(&self) -> u128 {
        self.total_flops - self.extra_flops()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {}\nlayer,flops,extra_flops,params,live_bytes\n", self.convention);
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{},{}\n", l.name, l.flops, l.extra_flops, l.params, l.live_bytes));
        }
        s.push_str(&format!("total,{},{},{},{}\n", self.total_flops, self.extra_flops(), self.total_params, self.peak_bytes));
        s
    }
}

fn dense(n: u128, i: u128, o: u128) -> u128 {
    2 * n * i * o + n * o
}

/// Cost of one inference pass over an `H×W` token grid, in finetune form
/// (3×3 convolution kernels for ViTAE).
pub fn model_cost(cfg: &ModelConfig, (th, tw): (usize, usize)) -> Result<CostReport> {
    cfg.validate()?;
    positive(&[("token rows", th), ("token cols", tw)])?;
    let c = cfg.embed_dim as u128;
    let n = (th * tw) as u128;
    let heads = cfg.heads as u128;
    let patch_in = (cfg.patch_size * cfg.patch_size * cfg.in_channels) as u128;
    let hidden = cfg.ffn_ratio as u128 * c;
    let mut layers = Vec::new();

    layers.push(LayerCost {
        name: "patch_embed".into(),
        flops: dense(n, patch_in, c) + n * c,
        extra_flops: 0,
        params: patch_in * c + c,
        live_bytes: (n * patch_in + 2 * n * c) * BYTES_PER_VALUE,
    });

    for i in 0..cfg.depth {
        let variant = cfg.layer_variant(i);
        let (core, logits, kv_tokens, extra) = if variant == Variant::Full {
            (2 * n * n * c, heads * n * n, n, Ratio::from_integer(0))
        } else {
            let grid = WindowGrid::partition(th, tw, cfg.window_size)?;
            let (hp, wp) = (grid.padded_height(), grid.padded_width());
            let core = window_attention_flops(hp, wp, cfg.embed_dim, cfg.window_size)?.core;
            let np = (hp * wp) as u128;
            let extra = match variant.transform_heads() {
                0 => Ratio::from_integer(0),
                m => transform_extra(hp, wp, cfg.embed_dim, cfg.window_size, cfg.heads, m)?.total(),
            };
            (core, heads * np * grid.points() as u128, np, extra)
        };
        if !extra.is_integer() {
            return Err(Error::Evaluation("non-integral window extra on a padded grid".into()));
        }
        let extra = extra.to_integer();
        let transform_params =
            variant.transform_heads() as u128 * (c * PARAMS_PER_HEAD as u128 * heads + PARAMS_PER_HEAD as u128 * heads);
        let attn = 4 * dense(n, c, c) + 2 * core + SOFTMAX_PER_LOGIT * logits + extra;
        let mlp = dense(n, c, hidden) + dense(n, hidden, c) + GELU_PER_ELEM * n * hidden;
        let norms = 2 * LN_PER_ELEM * n * c;
        let residual = 2 * n * c;
        let (pcm_flops, pcm_params) = if cfg.arch == Arch::Vitae {
            let per = c / cfg.pcm_groups as u128;
            let conv = 2 * n * c * per * 9;
            (2 * conv + BN_PER_ELEM * n * c + SILU_PER_ELEM * n * c + n * c, 2 * c * per * 9 + 2 * c)
        } else {
            (0, 0)
        };
        let params = 4 * (c * c + c) + transform_params + (c * hidden + hidden + hidden * c + c) + 4 * c + pcm_params;
        let attn_live = n * c + 3 * kv_tokens * c + logits;
        let mlp_live = 2 * n * c + n * hidden;
        layers.push(LayerCost {
            name: format!("block{}:{variant}", i + 1),
            flops: attn + mlp + norms + residual + pcm_flops,
            extra_flops: extra,
            params,
            live_bytes: attn_live.max(mlp_live) * BYTES_PER_VALUE,
        });
    }

    let k = cfg.num_classes as u128;
    layers.push(LayerCost {
        name: "head".into(),
        flops: LN_PER_ELEM * n * c + n * c + if k > 0 { dense(1, c, k) } else { 0 },
        extra_flops: 0,
        params: 2 * c + if k > 0 { c * k + k } else { 0 },
        live_bytes: (2 * n * c + c + k) * BYTES_PER_VALUE,
    });

    Ok(CostReport {
        convention: CONVENTION.into(),
        tokens: (th, tw),
        variant: cfg.variant,
        total_flops: layers.iter().map(|l| l.flops).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        peak_bytes: layers.iter().map(|l| l.live_bytes).max().unwrap_or(0),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::build_model;
    use crate::tensor::ParamStore;

    #[test]
    fn core_term_by_hand() {
        assert_eq!(window_attention_flops(14, 14, 16, 7).unwrap().core, 307_328);
        assert_eq!(window_attention_flops(5, 3, 2, 1).unwrap().core, 2 * 5 * 3 * 2);
        assert!(matches!(window_attention_flops(0, 3, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn ratio_at_default_window() {
        assert_eq!(extra_ratio(7, 12).unwrap(), Ratio::new(545, 4802));
        assert_eq!(rvsa_extra_flops(3, 5, 7, 2, 0).unwrap().total(), Ratio::from_integer(5 * 3 * 5 * 7));
    }

    #[test]
    fn parameter_count_matches_built_model() {
        for cfg in [ModelConfig::desk(), ModelConfig::desk_vitae()] {
            let mut store = ParamStore::<f64>::new();
            let mut model = build_model(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            model.finetune(&mut store).unwrap();
            let report = model_cost(&cfg, (8, 8)).unwrap();
            assert_eq!(report.total_params, store.num_trainable() as u128, "{}", cfg.arch);
        }
    }

    #[test]
    fn base_preset_ordering() {
        let at = |v| model_cost(&ModelConfig { variant: v, ..ModelConfig::vit_base() }, (64, 64)).unwrap();
        let all_full = model_cost(
            &ModelConfig { full_attention_layers: (1..=12).collect(), ..ModelConfig::vit_base() },
            (64, 64),
        )
        .unwrap();
        let (window, rvsa) = (at(Variant::Window), at(Variant::Rvsa));
        assert!(all_full.total_flops > window.total_flops);
        assert_eq!(window.total_flops + rvsa.extra_flops(), rvsa.total_flops);
        assert_eq!(at(Variant::Vsa).core_flops(), window.total_flops);
    }
}
