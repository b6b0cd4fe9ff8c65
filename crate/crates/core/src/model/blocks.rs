use rand::Rng;

use super::layers::{BatchNorm, LayerNorm};
use crate::attention::{AttentionConfig, AttentionLayer, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Init, LinearLayer, ParamId, ParamStore, Real, Session, Tensor, Var};

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), dim, hidden, Init::XavierUniform, rng)?,
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), hidden, dim, Init::XavierUniform, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(session, x)?;
        let h = session.graph.activation(h, Activation::Gelu);
        self.fc2.forward(session, h)
    }
}

/// A 1×1 kernel split into its learned center `θ` and the ring `α` of the
/// 3×3 kernel it grows into.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmKernel {
    /// `C_out × C_in/groups × 1 × 1`
    pub theta: Tensor<f64>,
    /// `C_out × C_in/groups × 8`, ring positions in row-major order
    pub alpha: Tensor<f64>,
}

impl PcmKernel {
    pub fn from_pretrained(theta: Tensor<f64>) -> Result<Self> {
        let s = theta.shape();
        if s.len() != 4 || s[2] != 1 || s[3] != 1 {
            return Err(Error::Contract(format!("kernel padding expects a 1x1 kernel, got {s:?}")));
        }
        let alpha = Tensor::zeros([s[0], s[1], 8]);
        Ok(Self { theta, alpha })
    }

    /// The `C_out × C_in/groups × 3 × 3` kernel: `θ` at the center, `α` around it.
    pub fn kernel(&self) -> Tensor<f64> {
        let s = self.theta.shape();
        let (co, ci) = (s[0], s[1]);
        let (theta, alpha) = (self.theta.data(), self.alpha.data());
        Tensor::from_fn([co, ci, 3, 3], |i| {
            let (pair, tap) = (i / 9, i % 9);
            match tap {
                4 => theta[pair],
                t if t < 4 => alpha[pair * 8 + t],
                t => alpha[pair * 8 + t - 1],
            }
        })
    }
}

/// Grows a pretrained 1×1 kernel into a 3×3 one with a zero ring.
pub fn pad_pcm_kernel<T: Real>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(PcmKernel::from_pretrained(kernel.cast())?.kernel().cast())
}

/// Convolution branch: grouped conv, batch norm, SiLU, grouped conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pcm {
    pub conv1: ParamId,
    pub bn: BatchNorm,
    pub conv2: ParamId,
    pub groups: usize,
}

impl Pcm {
    /// Registers the branch with 1×1 kernels (pretraining form).
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        if groups == 0 || !dim.is_multiple_of(groups) {
            return Err(Error::config(format!("{dim} channels are not divisible into {groups} groups")));
        }
        let per = dim / groups;
        let shape = [dim, per, 1, 1];
        let conv1 = store.insert(format!("{name}.conv1"), Init::XavierUniform.tensor(&shape, per, per, rng));
        let bn = BatchNorm::new(store, &format!("{name}.bn"), dim);
        let conv2 = store.insert(format!("{name}.conv2"), Init::XavierUniform.tensor(&shape, per, per, rng));
        Ok(Self { conv1, bn, conv2, groups })
    }

    pub fn kernel_size<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.conv1).shape()[2]
    }

    /// Replaces both 1×1 kernels by their zero-ring 3×3 padding.
    pub fn pad_kernels<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in [self.conv1, self.conv2] {
            let padded = pad_pcm_kernel(store.get(id))?;
            store.replace(id, padded);
        }
        Ok(())
    }

    /// Applies the branch to tokens `[h·w, C]` laid out on an `h×w` grid.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
        let c = session.graph.shape(x)[1];
        let k = self.kernel_size(session.store());
        let (k1, k2) = (session.param(self.conv1), session.param(self.conv2));
        let g = &mut session.graph;
        let img = g.transpose(x)?;
        let img = g.reshape(img, [c, h, w])?;
        let y = g.conv2d(img, k1, self.groups, k / 2)?;
        let y = g.reshape(y, [c, h * w])?;
        let y = g.transpose(y)?;
        let y = self.bn.forward(session, y)?;
        let g = &mut session.graph;
        let y = g.activation(y, Activation::Silu);
        let y = g.transpose(y)?;
        let y = g.reshape(y, [c, h, w])?;
        let y = g.conv2d(y, k2, self.groups, k / 2)?;
        let y = g.reshape(y, [c, h * w])?;
        g.transpose(y)
    }
}

/// Pre-norm transformer block, optionally with a parallel convolution
/// branch (ViTAE normal cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: AttentionLayer,
    pub pcm: Option<Pcm>,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        attn: AttentionConfig,
        ffn_ratio: usize,
        pcm_groups: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = attn.embed_dim;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
        let attn = AttentionLayer::new(store, &format!("{name}.attn"), attn, rng)?;
        let pcm = pcm_groups.map(|g| Pcm::new(store, &format!("{name}.pcm"), c, g, rng)).transpose()?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), c);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), c, ffn_ratio * c, rng)?;
        Ok(Self { norm1, attn, pcm, norm2, mlp })
    }

    /// `x + Attn(LN(x)) [+ PCM(x)]`, then `+ FFN(LN(·))`. With `grid`
    /// `None` the tokens have no 2-D layout (masked pretraining): attention
    /// is global and the convolution branch must use 1×1 kernels.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var, grid: Option<(usize, usize)>) -> Result<Var> {
        let n = session.graph.shape(x)[0];
        let y = self.norm1.forward(session, x)?;
        let a = match grid {
            Some(hw) => self.attn.forward(session, y, hw)?,
            None => self.global_attention().forward(session, y, (1, n))?,
        };
        let mut x1 = session.graph.add(x, a)?;
        if let Some(pcm) = &self.pcm {
            let hw = match grid {
                Some(hw) => hw,
                None if pcm.kernel_size(session.store()) == 1 => (1, n),
                None => return Err(Error::Contract("3x3 convolution branch needs a token grid".into())),
            };
            let p = pcm.forward(session, x, hw)?;
            x1 = session.graph.add(x1, p)?;
        }
        let y = self.norm2.forward(session, x1)?;
        let f = self.mlp.forward(session, y)?;
        session.graph.add(x1, f)
    }

    /// This block's projections with global attention and no transform heads.
    fn global_attention(&self) -> AttentionLayer {
        let mut layer = self.attn.clone();
        layer.cfg.variant = Variant::Full;
        layer.transform.clear();
        layer
    }
}

fn run_block(x: &Tensor<f64>, block: &Block, store: &ParamStore<f64>, training: bool) -> Result<Tensor<f64>> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::dim(format!("feature map must be C×H×W, got {:?}", x.shape())));
    };
    let mut session = Session::new(store, training);
    let tokens = super::chw_to_tokens_var(&mut session.graph, x)?;
    let y = block.forward(&mut session, tokens, Some((h, w)))?;
    let y = session.graph.transpose(y)?;
    session.graph.value(y).clone().reshape([c, h, w])
}

/// Applies a ViT block to a `C×H×W` map.
pub fn transformer_block(x: &Tensor<f64>, block: &Block, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
    if block.pcm.is_some() {
        return Err(Error::config("block carries a convolution branch; use vitae_normal_cell"));
    }
    run_block(x, block, store, false)
}

/// Applies a ViTAE normal cell to a `C×H×W` map (inference statistics).
pub fn vitae_normal_cell(x: &Tensor<f64>, block: &Block, store: &ParamStore<f64>) -> Result<Tensor<f64>> {
    if block.pcm.is_none() {
        return Err(Error::config("block has no convolution branch"));
    }
    run_block(x, block, store, false)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn padding_five() {
        let k = pad_pcm_kernel(&Tensor::<f64>::full([1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(k.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(pad_pcm_kernel(&Tensor::<f64>::zeros([1, 1, 3, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn ring_order_is_row_major() {
        let mut pk = PcmKernel::from_pretrained(Tensor::full([1, 1, 1, 1], 9.0)).unwrap();
        pk.alpha.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(pk.kernel().data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 5.0, 6.0, 7.0, 8.0]);
    }

    fn block(variant: Variant, pcm: Option<usize>) -> (ParamStore<f64>, Block) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::new(8, 2, 3, variant).unwrap();
        let b = Block::new(&mut store, "b", cfg, 2, pcm, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn zeroed_residual_branches_give_identity() {
        let (mut store, b) = block(Variant::Rvsa, None);
        for id in [b.attn.proj.weight, b.attn.proj.bias, b.mlp.fc2.weight, b.mlp.fc2.bias] {
            let shape = store.get(id).shape().to_vec();
            store.replace(id, Tensor::zeros(shape));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([8, 4, 5], 1.0, &mut rng);
        assert_eq!(transformer_block(&x, &b, &store).unwrap(), x);
    }

    #[test]
    fn dead_convolution_branch_matches_plain_block() {
        let (mut store, b) = block(Variant::Window, Some(4));
        let pcm = b.pcm.unwrap();
        store.replace(pcm.conv2, Tensor::zeros(store.get(pcm.conv2).shape().to_vec()));
        let plain = Block { pcm: None, ..b.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([8, 5, 5], 1.0, &mut rng);
        assert_eq!(vitae_normal_cell(&x, &b, &store).unwrap(), transformer_block(&x, &plain, &store).unwrap());
    }

    #[test]
    fn indivisible_groups_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Pcm::new(&mut store, "p", 8, 3, &mut rng), Err(Error::Config(_))));
    }
}
