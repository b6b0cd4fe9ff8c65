//! Patch embedding, transformer blocks, ViTAE normal cells and full-model assembly.

mod blocks;
pub mod checkpoint;
mod config;
mod embed;
mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{pad_pcm_kernel, transformer_block, vitae_normal_cell, Block, Mlp, Pcm, PcmKernel};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{interleave_schedule, Arch, ModelConfig, PRESETS};
pub use embed::{patch_embed, patchify, sincos_encoding, sincos_tokens, PatchEmbed};
pub use layers::{apply_stats_updates, BatchNorm, LayerNorm, BN_MOMENTUM, NORM_EPS};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, LinearLayer, ParamStore, Real, Session, Tensor, Var};

/// Whether convolution branches still hold their 1×1 pretraining kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Records a `C×H×W` tensor as a leaf and returns its `(H·W)×C` token view.
pub fn chw_to_tokens_var<T: Real>(graph: &mut Graph<T>, x: &Tensor<T>) -> Result<Var> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::dim(format!("feature map must be C×H×W, got {:?}", x.shape())));
    };
    let leaf = graph.leaf(x.clone().reshape([c, h * w])?);
    graph.transpose(leaf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Option<LinearLayer>,
    pub mode: Mode,
}

/// Nodes produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// final normalized tokens, `[H·W, C]`
    pub tokens: Var,
    pub grid: (usize, usize),
    /// global average of the tokens, `[C]`
    pub pooled: Var,
    pub logits: Option<Var>,
}

/// Registers every parameter of `cfg` in `store`. The model starts in
/// pretraining mode with zero transform heads.
pub fn build_model<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Model> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let embed = PatchEmbed::new(store, "patch_embed", cfg.in_channels, cfg.patch_size, c, rng)?;
    let pcm = (cfg.arch == Arch::Vitae).then_some(cfg.pcm_groups);
    let blocks = (0..cfg.depth)
        .map(|i| Block::new(store, &format!("blocks.{i}"), cfg.attention(i)?, cfg.ffn_ratio, pcm, rng))
        .collect::<Result<_>>()?;
    let norm = LayerNorm::new(store, "norm", c);
    let head = (cfg.num_classes > 0)
        .then(|| LinearLayer::new(store, "head", c, cfg.num_classes, Init::Normal(0.02), rng))
        .transpose()?;
    Ok(Model { cfg: cfg.clone(), embed, blocks, norm, head, mode: Mode::Pretrain })
}

impl Model {
    /// Switches to finetuning: every 1×1 convolution kernel is padded to 3×3
    /// with a zero ring. Fails if already done.
    pub fn finetune<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.mode == Mode::Finetune {
            return Err(Error::Contract("model is already in finetune mode".into()));
        }
        for pcm in self.blocks.iter().filter_map(|b| b.pcm.as_ref()) {
            pcm.pad_kernels(store)?;
        }
        self.mode = Mode::Finetune;
        Ok(())
    }

    /// Runs the blocks and final norm on tokens `[N, C]`. `grid` gives their
    /// 2-D layout; without it every layer attends globally.
    pub fn encode<T: Real>(&self, session: &mut Session<'_, T>, tokens: Var, grid: Option<(usize, usize)>) -> Result<Var> {
        let mut x = tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            session.layer = i;
            x = block.forward(session, x, grid)?;
        }
        self.norm.forward(session, x)
    }

    /// Patch embedding, sin-cos position table, blocks, final norm, pooling
    /// and the optional classifier, for a `C_in×H×W` image node.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, image: Var) -> Result<ModelOutput> {
        if !session.graph.value(image).all_finite() {
            return Err(Error::Evaluation("non-finite model input".into()));
        }
        let (tokens, (gh, gw)) = self.embed.forward(session, image)?;
        let pos = session.graph.leaf(sincos_tokens(gh, gw, self.cfg.embed_dim)?);
        let x = session.graph.add(tokens, pos)?;
        let tokens = self.encode(session, x, Some((gh, gw)))?;
        let pooled = session.graph.mean_axis(tokens, 0)?;
        let logits = match &self.head {
            Some(head) => Some(head.forward(session, pooled)?),
            None => None,
        };
        Ok(ModelOutput { tokens, grid: (gh, gw), pooled, logits })
    }

    /// Inference on one image; returns the final tokens as a `C×h×w` map.
    pub fn features<T: Real>(&self, image: &Tensor<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut session = Session::new(store, false);
        let x = session.graph.leaf(image.clone());
        let out = self.forward(&mut session, x)?;
        let t = session.graph.transpose(out.tokens)?;
        let (h, w) = out.grid;
        session.graph.value(t).clone().reshape([self.cfg.embed_dim, h, w])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::attention::Variant;

    fn small(arch: Arch) -> ModelConfig {
        ModelConfig { arch, embed_dim: 16, heads: 2, pcm_groups: 4, window_size: 3, ..ModelConfig::desk() }
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let cfg = small(Arch::Vitae);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let model = build_model(&cfg, &mut store, &mut rng).unwrap();
        let img = Tensor::randn([3, 20, 28], 1.0, &mut rng);
        let a = model.features(&img, &store).unwrap();
        assert_eq!(a.shape(), &[16, 5, 7]);
        assert!(a.all_finite());
        assert_eq!(a, model.features(&img, &store).unwrap());
    }

    #[test]
    fn finetune_switch_preserves_outputs_and_runs_once() {
        let cfg = small(Arch::Vitae);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut model = build_model(&cfg, &mut store, &mut rng).unwrap();
        let img = Tensor::randn([3, 16, 16], 1.0, &mut rng);
        let before = model.features(&img, &store).unwrap();
        model.finetune(&mut store).unwrap();
        assert_eq!(store.get(model.blocks[0].pcm.unwrap().conv1).shape()[2], 3);
        assert_eq!(model.features(&img, &store).unwrap(), before);
        assert!(matches!(model.finetune(&mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_transform_heads_equal_window_model() {
        let cfg = small(Arch::Vit);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let model = build_model(&cfg, &mut store, &mut rng).unwrap();
        let window_cfg = ModelConfig { variant: Variant::Window, ..cfg };
        let mut wstore = ParamStore::<f64>::new();
        let mut wmodel = build_model(&window_cfg, &mut wstore, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // copy shared parameters by name
        for id in wstore.ids().collect::<Vec<_>>() {
            let src = store.find(wstore.name(id)).unwrap();
            *wstore.get_mut(id) = store.get(src).clone();
        }
        wmodel.mode = model.mode;
        let img = Tensor::randn([3, 20, 20], 1.0, &mut rng);
        assert_eq!(model.features(&img, &store).unwrap(), wmodel.features(&img, &wstore).unwrap());
    }
}
