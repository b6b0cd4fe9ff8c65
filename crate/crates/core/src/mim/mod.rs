//! Toy masked image modeling: random token masking, an encoder over the
//! visible tokens, a light decoder with a learned mask token, and a
//! per-patch normalized pixel loss on the masked tokens.

mod data;
mod optim;

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use data::{load_image_dir, read_netpbm, synthetic_stripes, write_loss_csv};
pub use optim::AdamW;

use crate::attention::{AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{apply_stats_updates, build_model, patchify, sincos_tokens, Block, LayerNorm, Model, ModelConfig, BN_MOMENTUM};
use crate::tensor::{Init, LinearLayer, ParamId, ParamStore, Real, Session, Tensor, Var};

pub const TARGET_EPS: f64 = 1e-6;

/// A split of `total_tokens` into masked and visible tokens, both sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub total_tokens: usize,
    pub visible_ids: Vec<usize>,
    pub masked_ids: Vec<usize>,
    /// fraction masked, in parts per million
    pub ratio_ppm: u32,
    pub seed: u64,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        self.ratio_ppm as f64 / 1e6
    }
}

/// Number of masked tokens: `ratio·n` rounded half up.
pub fn mask_count(total_tokens: usize, ratio: f64) -> usize {
    ((ratio * total_tokens as f64) + 0.5).floor() as usize
}

/// Uniformly random masked subset of size `round(ratio·n)`, deterministic per seed.
pub fn random_mask(total_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let count = mask_count(total_tokens, ratio).min(total_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = sample(&mut rng, total_tokens, count).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; total_tokens];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..total_tokens).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        total_tokens,
        visible_ids: visible,
        masked_ids: masked,
        ratio_ppm: (ratio * 1e6).round() as u32,
        seed,
    })
}

/// `(x - mean) / sqrt(var + ε)` with the population variance; constant
/// patches map to zeros.
pub fn normalized_pixel_target(patch: &[f64]) -> Vec<f64> {
    let n = patch.len().max(1) as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + TARGET_EPS).sqrt();
    patch.iter().map(|v| (v - mean) * inv).collect()
}

/// Normalized patch targets `[tokens, p·p·C_in]` of one image.
pub fn normalized_targets(image: &Tensor<f64>, patch: usize) -> Result<Tensor<f64>> {
    let rows = patchify(image, patch)?;
    let width = rows.shape()[1];
    if width < 2 {
        return Err(Error::dim("normalized targets need patches of at least two values"));
    }
    let data = rows.data().chunks(width).flat_map(normalized_pixel_target).collect();
    Tensor::new(rows.shape().to_vec(), data)
}

/// Images with their normalized patch targets.
#[derive(Debug, Clone)]
pub struct MimBatch {
    pub images: Vec<Tensor<f64>>,
    pub targets: Vec<Tensor<f64>>,
}

impl MimBatch {
    pub fn new(images: Vec<Tensor<f64>>, patch: usize) -> Result<Self> {
        let targets = images.iter().map(|img| normalized_targets(img, patch)).collect::<Result<_>>()?;
        Ok(Self { images, targets })
    }
}

/// Lightweight reconstruction decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub embed: LinearLayer,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: LinearLayer,
    pub width: usize,
}

impl Decoder {
    /// `depth` global-attention blocks of `width` channels predicting
    /// `patch_dim` values per token.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        encoder: &ModelConfig,
        width: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let patch_dim = encoder.patch_size * encoder.patch_size * encoder.in_channels;
        let heads = (1..=encoder.heads).rev().find(|h| width.is_multiple_of(*h)).unwrap_or(1);
        let attn = AttentionConfig::new(width, heads, encoder.window_size, Variant::Full)?;
        Ok(Self {
            embed: LinearLayer::new(store, "decoder.embed", encoder.embed_dim, width, Init::XavierUniform, rng)?,
            mask_token: store.insert("decoder.mask_token", Init::Normal(0.02).tensor(&[width], 1, width, rng)),
            blocks: (0..depth)
                .map(|i| Block::new(store, &format!("decoder.blocks.{i}"), attn, encoder.ffn_ratio, None, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "decoder.norm", width),
            pred: LinearLayer::new(store, "decoder.pred", width, patch_dim, Init::XavierUniform, rng)?,
            width,
        })
    }

    /// Predictions `[tokens, patch_dim]` for all tokens of an `h×w` grid,
    /// given encoded visible tokens.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, encoded: Var, plan: &MaskPlan, grid: (usize, usize)) -> Result<Var> {
        let n = plan.total_tokens;
        let d = self.width;
        let x = self.embed.forward(session, encoded)?;
        let mut row_of = vec![None; n];
        for (r, &t) in plan.visible_ids.iter().enumerate() {
            row_of[t] = Some(r);
        }
        let vis_idx: Arc<[Option<usize>]> =
            (0..n * d).map(|i| row_of[i / d].map(|r| r * d + i % d)).collect();
        let mask_idx: Arc<[Option<usize>]> =
            (0..n * d).map(|i| row_of[i / d].is_none().then_some(i % d)).collect();
        let mt = session.param(self.mask_token);
        let g = &mut session.graph;
        let vis = g.gather(x, [n, d], vis_idx)?;
        let masks = g.gather(mt, [n, d], mask_idx)?;
        let full = g.add(vis, masks)?;
        let pos = g.leaf(sincos_tokens(grid.0, grid.1, d)?);
        let mut y = g.add(full, pos)?;
        for block in &self.blocks {
            y = block.forward(session, y, None)?;
        }
        let y = self.norm.forward(session, y)?;
        self.pred.forward(session, y)
    }
}

/// Mean squared error between predicted and target rows, over the masked rows only.
pub fn masked_mse<T: Real>(session: &mut Session<'_, T>, pred: Var, target: &Tensor<T>, masked: &[usize]) -> Result<Var> {
    let g = &mut session.graph;
    if g.shape(pred) != target.shape() || target.rank() != 2 {
        return Err(Error::dim(format!("prediction {:?} vs target {:?}", g.shape(pred), target.shape())));
    }
    if masked.is_empty() {
        return Err(Error::dim("no masked tokens to score"));
    }
    let width = target.shape()[1];
    let idx: Arc<[Option<usize>]> = masked.iter().flat_map(|&t| (0..width).map(move |c| Some(t * width + c))).collect();
    let shape = [masked.len(), width];
    let p = g.gather(pred, shape, idx.clone())?;
    let t = g.leaf(target.clone());
    let t = g.gather(t, shape, idx)?;
    let diff = g.sub(p, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Loss of one image: encoder on the visible tokens, decoder on all tokens,
/// error on the masked tokens.
pub fn mim_loss<T: Real>(
    session: &mut Session<'_, T>,
    model: &Model,
    decoder: &Decoder,
    image: Var,
    target: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<Var> {
    let (tokens, grid) = model.embed.forward(session, image)?;
    let n = grid.0 * grid.1;
    if plan.total_tokens != n || target.shape().first() != Some(&n) {
        return Err(Error::dim(format!(
            "mask plan covers {} tokens, image has {n}, target has {:?}",
            plan.total_tokens,
            target.shape()
        )));
    }
    let c = model.cfg.embed_dim;
    let pos = session.graph.leaf(sincos_tokens(grid.0, grid.1, c)?);
    let x = session.graph.add(tokens, pos)?;
    let idx: Arc<[Option<usize>]> = plan.visible_ids.iter().flat_map(|&t| (0..c).map(move |k| Some(t * c + k))).collect();
    let visible = session.graph.gather(x, [plan.visible_ids.len(), c], idx)?;
    let encoded = model.encode(session, visible, None)?;
    let pred = decoder.forward(session, encoded, plan, grid)?;
    masked_mse(session, pred, target, &plan.masked_ids)
}

/// Mean of [`mim_loss`] over a batch, one plan per image.
pub fn mim_step<T: Real>(
    session: &mut Session<'_, T>,
    model: &Model,
    decoder: &Decoder,
    batch: &MimBatch,
    plans: &[MaskPlan],
) -> Result<Var> {
    if plans.len() != batch.images.len() || batch.images.is_empty() {
        return Err(Error::dim(format!("{} plans for {} images", plans.len(), batch.images.len())));
    }
    let mut total: Option<Var> = None;
    for ((img, target), plan) in batch.images.iter().zip(&batch.targets).zip(plans) {
        let x = session.graph.leaf(img.cast());
        let l = mim_loss(session, model, decoder, x, &target.cast(), plan)?;
        total = Some(match total {
            Some(t) => session.graph.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(session.graph.scale(total, 1.0 / plans.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize },
    Folder(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub seed: u64,
    pub data: DataSource,
    pub loss_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig { num_classes: 0, ..ModelConfig::desk() };
        Self {
            decoder_width: model.embed_dim / 2,
            model,
            image_size: 32,
            batch_size: 8,
            steps: 200,
            lr: 1e-3,
            weight_decay: 0.05,
            mask_ratio: 0.75,
            decoder_depth: 1,
            seed: 0,
            data: DataSource::Synthetic { count: 256 },
            loss_csv: None,
            checkpoint: None,
        }
    }
}

/// Result of a toy pretraining run.
pub struct TrainRun {
    pub losses: Vec<f64>,
    pub model: Model,
    pub decoder: Decoder,
    pub store: ParamStore<f64>,
}

/// Trains encoder and decoder for `cfg.steps` steps; fully determined by `cfg.seed`.
pub fn pretrain(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.model.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = match &cfg.data {
        DataSource::Synthetic { count } => synthetic_stripes(*count, cfg.model.in_channels, cfg.image_size, &mut rng),
        DataSource::Folder(dir) => load_image_dir(dir, cfg.model.in_channels)?,
    };
    if images.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut store = ParamStore::<f64>::new();
    let model = build_model(&cfg.model, &mut store, &mut rng)?;
    let decoder = Decoder::new(&mut store, &cfg.model, cfg.decoder_width, cfg.decoder_depth, &mut rng)?;
    let targets = images.iter().map(|img| normalized_targets(img, cfg.model.patch_size)).collect::<Result<Vec<_>>>()?;
    let tokens = targets[0].shape()[0];
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..images.len())).collect();
        let batch = MimBatch {
            images: picks.iter().map(|&i| images[i].clone()).collect(),
            targets: picks.iter().map(|&i| targets[i].clone()).collect(),
        };
        let plans = (0..cfg.batch_size)
            .map(|_| random_mask(tokens, cfg.mask_ratio, rng.gen()))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads, stats) = {
            let mut session = Session::new(&store, true);
            let loss = mim_step(&mut session, &model, &decoder, &batch, &plans)?;
            let grads = session.graph.backward(loss)?;
            (session.graph.value(loss).item()?, session.param_grads(&grads), session.stats_updates)
        };
        if !loss.is_finite() {
            return Err(Error::Evaluation(format!("loss diverged at step {}", losses.len())));
        }
        losses.push(loss);
        opt.step(&mut store, &grads);
        apply_stats_updates(&mut store, &stats, BN_MOMENTUM);
    }
    Ok(TrainRun { losses, model, decoder, store })
}

/// Per-step losses of a toy run with `steps` and `seed` overriding `cfg`.
pub fn train_toy(cfg: &TrainConfig, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let cfg = TrainConfig { steps, seed, ..cfg.clone() };
    Ok(pretrain(&cfg)?.losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        let p = random_mask(196, 0.75, 0).unwrap();
        assert_eq!((p.masked_ids.len(), p.visible_ids.len()), (147, 49));
        assert_eq!(random_mask(4, 0.75, 3).unwrap().masked_ids.len(), 3);
        assert_eq!(p, random_mask(196, 0.75, 0).unwrap());
        assert!(matches!(random_mask(10, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(random_mask(10, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn targets_normalize() {
        assert!(normalized_pixel_target(&[3.0; 5]).iter().all(|&v| v == 0.0));
        let t = normalized_pixel_target(&[0.0, 2.0]);
        let s = 1.0 / (1.0 + TARGET_EPS).sqrt();
        assert!((t[0] + s).abs() < 1e-15 && (t[1] - s).abs() < 1e-15);
    }

    fn tiny() -> TrainConfig {
        let model = ModelConfig { embed_dim: 16, heads: 2, num_classes: 0, ..ModelConfig::desk() };
        TrainConfig {
            decoder_width: 8,
            model,
            image_size: 16,
            batch_size: 2,
            data: DataSource::Synthetic { count: 4 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_and_determinism() {
        assert!(train_toy(&tiny(), 0, 0).unwrap().is_empty());
        let a = train_toy(&tiny(), 3, 5).unwrap();
        assert_eq!(a, train_toy(&tiny(), 3, 5).unwrap());
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn exact_and_zero_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let target = Tensor::<f64>::randn([6, 4], 1.0, &mut rng);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let p = s.graph.leaf(target.clone());
        let l = masked_mse(&mut s, p, &target, &[0, 2, 5]).unwrap();
        assert_eq!(s.graph.value(l).item().unwrap(), 0.0);
        let z = s.graph.leaf(Tensor::zeros([6, 4]));
        let l = masked_mse(&mut s, z, &target, &[1, 3]).unwrap();
        let want: f64 = [1, 3].iter().flat_map(|&r| target.data()[r * 4..r * 4 + 4].iter()).map(|v| v * v).sum::<f64>() / 8.0;
        assert!((s.graph.value(l).item().unwrap() - want).abs() < 1e-12);
    }
}
