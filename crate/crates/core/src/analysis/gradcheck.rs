//! Finite-difference checks of every tape operation and of composite modules.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionLayer, Variant};
use crate::error::{Error, Result};
use crate::geometry::WindowGrid;
use crate::mim::{mim_loss, normalized_targets, random_mask, synthetic_stripes, Decoder};
use crate::model::{build_model, Arch, Block, ModelConfig};
use crate::tensor::{finite_diff_check_at, Activation, GradCheck, Graph, ParamId, ParamStore, Real, Session, Tensor, Var};

/// Names accepted by [`gradcheck_module`].
pub const MODULES: [&str; 24] = [
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
    "attention",
    "block",
    "vitae_cell",
    "model_small",
    "model_vitae_small",
    "mim",
    "model",
];

/// One checked tensor of a module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl ModuleCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.tensors.is_empty() && self.tensors.iter().all(|t| t.checked > 0 && t.max_rel_error < self.tolerance)
    }
}

struct Checker<T: Real> {
    eps: f64,
    rng: ChaCha8Rng,
    out: Vec<TensorCheck>,
    _t: std::marker::PhantomData<T>,
}

/// Scalar loss `Σ y ⊙ R` with a fixed random `R`, so no gradient is trivially uniform.
fn weighted<T: Real>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.leaf(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

impl<T: Real> Checker<T> {
    fn new(seed: u64) -> Self {
        Self { eps: T::PRECISION.default_step(), rng: ChaCha8Rng::seed_from_u64(seed), out: Vec::new(), _t: Default::default() }
    }

    fn coords(&mut self, len: usize, limit: Option<usize>) -> Vec<usize> {
        match limit {
            Some(k) if k < len => {
                let mut v = sample(&mut self.rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    }

    fn record(&mut self, name: impl Into<String>, r: GradCheck) {
        self.out.push(TensorCheck { tensor: name.into(), max_rel_error: r.max_rel_error, checked: r.checked, skipped: r.skipped });
    }

    /// Checks `Σ f(x) ⊙ R` wrt `x`.
    fn op(&mut self, name: &str, x: Tensor<T>, f: impl Fn(&mut Graph<T>, Var) -> Result<Var>) -> Result<()> {
        let seed = self.rng.gen();
        let coords = self.coords(x.len(), None);
        let r = finite_diff_check_at(
            |g, v| {
                let y = f(g, v)?;
                weighted(g, y, seed)
            },
            &x,
            self.eps,
            &coords,
        )?;
        self.record(name, r);
        Ok(())
    }

    /// Checks a session-level computation wrt its input and each listed parameter.
    #[allow(clippy::too_many_arguments)]
    fn module(
        &mut self,
        store: &ParamStore<T>,
        training: bool,
        input: &Tensor<T>,
        params: &[ParamId],
        limit: Option<usize>,
        f: impl Fn(&mut Session<'_, T>, Var) -> Result<Var>,
    ) -> Result<()> {
        let seed = self.rng.gen();
        let coords = self.coords(input.len(), limit);
        let r = finite_diff_check_at(
            |g, x| {
                Session::within(g, store, training, |s| {
                    let y = f(s, x)?;
                    weighted(&mut s.graph, y, seed)
                })
            },
            input,
            self.eps,
            &coords,
        )?;
        self.record("input", r);
        for &id in params {
            let len = store.get(id).len();
            let mut total: Option<GradCheck> = None;
            // resample when every drawn coordinate sat on a kink
            for _ in 0..4 {
                let coords = self.coords(len, limit);
                let r = finite_diff_check_at(
                    |g, p| {
                        Session::within(g, store, training, |s| {
                            s.bind(id, p)?;
                            let x = s.graph.leaf(input.clone());
                            let y = f(s, x)?;
                            weighted(&mut s.graph, y, seed)
                        })
                    },
                    store.get(id),
                    self.eps,
                    &coords,
                )?;
                let merged = match total.take() {
                    None => r,
                    Some(t) => GradCheck {
                        max_rel_error: t.max_rel_error.max(r.max_rel_error),
                        worst_index: if r.max_rel_error > t.max_rel_error { r.worst_index } else { t.worst_index },
                        checked: t.checked + r.checked,
                        skipped: t.skipped + r.skipped,
                    },
                };
                let done = merged.checked > 0 || limit.is_none_or(|k| k >= len);
                total = Some(merged);
                if done {
                    break;
                }
            }
            self.record(store.name(id), total.expect("at least one round"));
        }
        Ok(())
    }
}

fn randn<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Gives every transform head small random weights and a random bias so
/// sampling points fall between tokens.
pub fn randomize_transform_heads<T: Real>(store: &mut ParamStore<T>, layers: &[&AttentionLayer], rng: &mut impl Rng) {
    for layer in layers {
        for head in &layer.transform {
            let (w, b) = (store.get(head.weight).shape().to_vec(), store.get(head.bias).shape().to_vec());
            *store.get_mut(head.weight) = Tensor::randn(w, 0.05, rng);
            *store.get_mut(head.bias) = Tensor::randn(b, 0.3, rng);
        }
    }
}

fn attention_check<T: Real>(c: &mut Checker<T>, variant: Variant, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2, 3, variant)?;
    let layer = AttentionLayer::new(&mut store, &format!("attn_{variant}"), cfg, rng)?;
    randomize_transform_heads(&mut store, &[&layer], rng);
    let (h, w) = (4, 5);
    let x = randn::<T>(rng, &[h * w, 8]);
    let ids: Vec<ParamId> = store.ids().collect();
    let before = c.out.len();
    c.module(&store, false, &x, &ids, None, |s, x| layer.forward(s, x, (h, w)))?;
    for t in &mut c.out[before..] {
        if t.tensor == "input" {
            t.tensor = format!("attn_{variant}.input");
        }
    }
    Ok(())
}

fn model_check<T: Real>(c: &mut Checker<T>, cfg: &ModelConfig, tokens: (usize, usize), limit: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let mut model = build_model(cfg, &mut store, rng)?;
    if cfg.arch == Arch::Vitae {
        model.finetune(&mut store)?;
    }
    let attn: Vec<&AttentionLayer> = model.blocks.iter().map(|b| &b.attn).collect();
    randomize_transform_heads(&mut store, &attn, rng);
    let img = randn::<T>(rng, &[cfg.in_channels, tokens.0 * cfg.patch_size, tokens.1 * cfg.patch_size]);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    c.module(&store, true, &img, &ids, Some(limit), |s, x| {
        let out = model.forward(s, x)?;
        let g = &mut s.graph;
        match out.logits {
            Some(l) => {
                let t = g.mean(out.tokens);
                let t = g.reshape(t, [1])?;
                let l = g.sum(l);
                let l = g.reshape(l, [1])?;
                g.add(t, l)
            }
            None => Ok(out.tokens),
        }
    })
}

/// Runs the named check in precision `T`.
pub fn gradcheck_module<T: Real>(name: &str, seed: u64) -> Result<ModuleCheck> {
    let mut c = Checker::<T>::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = &mut rng;
    match name {
        "add" => {
            let b = randn::<T>(r, &[3, 4]);
            c.op("add", randn(r, &[3, 4]), |g, x| {
                let b = g.leaf(b.clone());
                g.add(x, b)
            })?;
        }
        "mul" => {
            let b = randn::<T>(r, &[3, 4]);
            c.op("mul", randn(r, &[3, 4]), |g, x| {
                let b = g.leaf(b.clone());
                let y = g.mul(x, b)?;
                g.mul(y, x)
            })?;
        }
        "matmul" => {
            let b = randn::<T>(r, &[3, 5]);
            c.op("matmul.lhs", randn(r, &[4, 3]), |g, x| {
                let b = g.leaf(b.clone());
                g.matmul(x, b)
            })?;
            let a = randn::<T>(r, &[4, 3]);
            c.op("matmul.rhs", randn(r, &[3, 5]), |g, x| {
                let a = g.leaf(a.clone());
                g.matmul(a, x)
            })?;
        }
        "bmm" => {
            let b = randn::<T>(r, &[2, 5, 3]);
            c.op("bmm_nt.lhs", randn(r, &[2, 4, 3]), |g, x| {
                let b = g.leaf(b.clone());
                g.bmm(x, b, true)
            })?;
            let a = randn::<T>(r, &[2, 4, 3]);
            c.op("bmm_nt.rhs", randn(r, &[2, 5, 3]), |g, x| {
                let a = g.leaf(a.clone());
                g.bmm(a, x, true)
            })?;
            let b = randn::<T>(r, &[2, 3, 5]);
            c.op("bmm_nn.lhs", randn(r, &[2, 4, 3]), |g, x| {
                let b = g.leaf(b.clone());
                g.bmm(x, b, false)
            })?;
        }
        "transpose" => c.op("transpose", randn(r, &[3, 5]), |g, x| g.transpose(x))?,
        "softmax" => c.op("softmax", randn(r, &[3, 6]), |g, x| g.softmax(x))?,
        "leaky_relu" => c.op("leaky_relu", randn(r, &[4, 5]), |g, x| Ok(g.activation(x, Activation::LeakyRelu(0.01))))?,
        "silu" => c.op("silu", randn(r, &[4, 5]), |g, x| Ok(g.activation(x, Activation::Silu)))?,
        "gelu" => c.op("gelu", randn(r, &[4, 5]), |g, x| Ok(g.activation(x, Activation::Gelu)))?,
        "layer_norm" | "batch_norm" | "batch_norm_fixed" => {
            let (gain, bias) = (randn::<T>(r, &[4]), randn::<T>(r, &[4]));
            let stats = crate::tensor::BatchStats {
                mean: randn::<T>(r, &[4]).into_data(),
                var: Tensor::<T>::uniform([4], 0.5, 2.0, r).into_data(),
            };
            let kind = name.to_string();
            let f = move |g: &mut Graph<T>, x: Var, gv: Var, bv: Var| -> Result<Var> {
                match kind.as_str() {
                    "layer_norm" => g.layer_norm(x, gv, bv, 1e-6),
                    "batch_norm" => Ok(g.batch_norm(x, gv, bv, 1e-6)?.0),
                    _ => g.batch_norm_fixed(x, gv, bv, &stats, 1e-6),
                }
            };
            let x0 = randn::<T>(r, &[5, 4]);
            c.op(&format!("{name}.input"), x0.clone(), |g, x| {
                let (gv, bv) = (g.leaf(gain.clone()), g.leaf(bias.clone()));
                f(g, x, gv, bv)
            })?;
            c.op(&format!("{name}.gain"), gain.clone(), |g, gv| {
                let (x, bv) = (g.leaf(x0.clone()), g.leaf(bias.clone()));
                f(g, x, gv, bv)
            })?;
            c.op(&format!("{name}.bias"), bias.clone(), |g, bv| {
                let (x, gv) = (g.leaf(x0.clone()), g.leaf(gain.clone()));
                f(g, x, gv, bv)
            })?;
        }
        "conv2d" => {
            let k = randn::<T>(r, &[4, 2, 3, 3]);
            let x0 = randn::<T>(r, &[4, 5, 6]);
            c.op("conv2d.input", x0.clone(), |g, x| {
                let k = g.leaf(k.clone());
                g.conv2d(x, k, 2, 1)
            })?;
            c.op("conv2d.kernel", k, |g, kv| {
                let x = g.leaf(x0.clone());
                g.conv2d(x, kv, 2, 1)
            })?;
        }
        "gather" => {
            let idx: std::sync::Arc<[Option<usize>]> = [Some(3), None, Some(0), Some(3), Some(5), Some(1)].into();
            c.op("gather", randn(r, &[6]), |g, x| g.gather(x, [2, 3], idx.clone()))?;
        }
        "mean_axis" => {
            c.op("mean_axis.0", randn(r, &[3, 4, 2]), |g, x| g.mean_axis(x, 0))?;
            c.op("sum_axis.1", randn(r, &[3, 4, 2]), |g, x| g.sum_axis(x, 1))?;
        }
        "transform_grid" => {
            let grid = WindowGrid::partition(5, 6, 3)?;
            let p = randn::<T>(r, &[grid.num_windows(), 2, 5]);
            c.op("transform_grid", p, |g, x| g.transform_grid(x, &grid, 2))?;
        }
        "bilinear" => {
            let (h, w) = (5, 4);
            // non-integer coordinates, some outside the grid
            let coords = Tensor::<T>::uniform([2, 2, 6, 2], -1.3, 5.7, r);
            let feat = randn::<T>(r, &[h * w, 4]);
            c.op("bilinear.features", feat.clone(), |g, x| {
                let cv = g.leaf(coords.clone());
                g.bilinear_sample(x, cv, (h, w), true)
            })?;
            c.op("bilinear.coords", coords, |g, cv| {
                let x = g.leaf(feat.clone());
                g.bilinear_sample(x, cv, (h, w), true)
            })?;
        }
        "attention" => {
            let shape = [2, 5, 3];
            let (k, v) = (randn::<T>(r, &shape), randn::<T>(r, &shape));
            c.op("attention_core.q", randn(r, &shape), |g, q| {
                let (kv, vv) = (g.leaf(k.clone()), g.leaf(v.clone()));
                g.attention_core(q, kv, vv)
            })?;
            for variant in Variant::ALL {
                attention_check(&mut c, variant, r)?;
            }
        }
        "block" | "vitae_cell" => {
            let mut store = ParamStore::new();
            let pcm = (name == "vitae_cell").then_some(4);
            let block = Block::new(&mut store, name, AttentionConfig::new(8, 2, 3, Variant::Rvsa)?, 2, pcm, r)?;
            if let Some(p) = &block.pcm {
                p.pad_kernels(&mut store)?;
            }
            randomize_transform_heads(&mut store, &[&block.attn], r);
            let (h, w) = (4, 5);
            let x = randn::<T>(r, &[h * w, 8]);
            let ids: Vec<ParamId> = store.trainable_ids().collect();
            c.module(&store, true, &x, &ids, Some(24), |s, x| block.forward(s, x, Some((h, w))))?;
        }
        "model_small" | "model_vitae_small" => {
            let arch = if name == "model_small" { Arch::Vit } else { Arch::Vitae };
            let cfg = ModelConfig { arch, embed_dim: 16, heads: 2, pcm_groups: 4, window_size: 3, num_classes: 3, ..ModelConfig::desk() };
            model_check(&mut c, &cfg, (5, 4), 3, r)?;
        }
        "model" => model_check(&mut c, &ModelConfig::desk(), (32, 32), 2, r)?,
        "mim" => {
            let model_cfg = ModelConfig { embed_dim: 16, heads: 2, num_classes: 0, ..ModelConfig::desk() };
            let mut store = ParamStore::new();
            let model = build_model(&model_cfg, &mut store, r)?;
            let decoder = Decoder::new(&mut store, &model_cfg, 8, 1, r)?;
            let img = synthetic_stripes(1, 3, 16, r).remove(0);
            let target: Tensor<T> = normalized_targets(&img, 4)?.cast();
            let plan = random_mask(16, 0.75, r.gen())?;
            let ids: Vec<ParamId> = store.trainable_ids().collect();
            c.module(&store, true, &img.cast(), &ids, Some(4), |s, x| mim_loss(s, &model, &decoder, x, &target, &plan))?;
        }
        other => return Err(Error::config(format!("unknown gradcheck module `{other}`; known: {}", MODULES.join(", ")))),
    }
    Ok(ModuleCheck { module: name.into(), tolerance: T::PRECISION.gradcheck_tolerance(), tensors: c.out })
}
