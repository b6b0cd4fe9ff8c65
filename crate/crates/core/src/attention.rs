//! Full, fixed-window, varied-size and rotated varied-size multi-head attention.
//!
//! Layers work on token-major `(H·W)×C` matrices on a [`Session`] tape;
//! [`attend`] is the `C×H×W` convenience entry point.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::transform::{predict_on, PARAMS_PER_HEAD};
use crate::geometry::{SampleStream, WindowGrid};
use crate::tensor::{Graph, Init, LinearLayer, ParamStore, Real, Session, Tensor, TransformTap, Var};

pub const DEFAULT_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    Window,
    Vsa,
    Rvsa,
    /// RVSA with separate key and value transforms.
    RvsaDecoupled,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Window, Variant::Vsa, Variant::Rvsa, Variant::RvsaDecoupled];

    /// Number of transform prediction heads the variant owns.
    pub fn transform_heads(self) -> usize {
        match self {
            Variant::Full | Variant::Window => 0,
            Variant::Vsa | Variant::Rvsa => 1,
            Variant::RvsaDecoupled => 2,
        }
    }

    pub fn is_windowed(self) -> bool {
        self != Variant::Full
    }

    pub fn rotates(self) -> bool {
        matches!(self, Variant::Rvsa | Variant::RvsaDecoupled)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Window => "window",
            Variant::Vsa => "vsa",
            Variant::Rvsa => "rvsa",
            Variant::RvsaDecoupled => "rvsa-kv",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "mhsa" => Ok(Variant::Full),
            "window" | "wmhsa" => Ok(Variant::Window),
            "vsa" => Ok(Variant::Vsa),
            "rvsa" => Ok(Variant::Rvsa),
            "rvsa-kv" | "rvsa_kv" | "rvsa◇" | "rvsa-decoupled" => Ok(Variant::RvsaDecoupled),
            other => Err(Error::config(format!("unknown attention variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub window_size: usize,
    pub variant: Variant,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, heads: usize, window_size: usize, variant: Variant) -> Result<Self> {
        let cfg = Self { embed_dim, heads, window_size, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed dim {} is not a positive multiple of {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.window_size == 0 {
            return Err(Error::config("window size must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Projections and (for varied-size variants) transform heads of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub cfg: AttentionConfig,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub proj: LinearLayer,
    /// One head for VSA/RVSA, key then value head for the decoupled variant.
    pub transform: Vec<LinearLayer>,
}

impl AttentionLayer {
    /// Registers the layer under `name`. Projections use Xavier-uniform
    /// weights; transform heads start at zero, i.e. as identity windows.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let lin = |store: &mut ParamStore<T>, part: &str, rng: &mut _| {
            LinearLayer::new(store, &format!("{name}.{part}"), c, c, Init::XavierUniform, rng)
        };
        let query = lin(store, "q", rng)?;
        let key = lin(store, "k", rng)?;
        let value = lin(store, "v", rng)?;
        let proj = lin(store, "proj", rng)?;
        let tags: &[&str] = match cfg.variant.transform_heads() {
            0 => &[],
            1 => &["transform"],
            _ => &["transform_k", "transform_v"],
        };
        let transform = tags
            .iter()
            .map(|t| LinearLayer::new(store, &format!("{name}.{t}"), c, PARAMS_PER_HEAD * cfg.heads, Init::Zeros, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, query, key, value, proj, transform })
    }

    /// Attention over a token-major `(H·W)×C` matrix, output projection included.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
        let mixed = self.forward_heads(session, x, (h, w))?;
        self.proj.forward(session, mixed)
    }

    /// Everything up to the output projection: heads concatenated along
    /// channels, windows merged and cropped back to `(H·W)×C`.
    pub fn forward_heads<T: Real>(&self, session: &mut Session<'_, T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
        let cfg = &self.cfg;
        cfg.validate()?;
        let c = cfg.embed_dim;
        if h == 0 || w == 0 {
            return Err(Error::config(format!("empty token grid {h}x{w}")));
        }
        if session.graph.shape(x) != [h * w, c] {
            return Err(Error::dim(format!(
                "attention expects {}x{c} tokens, got {:?}",
                h * w,
                session.graph.shape(x)
            )));
        }
        if !session.graph.value(x).all_finite() {
            return Err(Error::Evaluation("non-finite attention input".into()));
        }
        let q = self.query.forward(session, x)?;
        let k = self.key.forward(session, x)?;
        let v = self.value.forward(session, x)?;
        if cfg.variant == Variant::Full {
            let n = h * w;
            let (split, merge) = (head_split_index(n, c, cfg.heads), head_merge_index(n, c, cfg.heads));
            let shape = [cfg.heads, n, cfg.head_dim()];
            let g = &mut session.graph;
            let (qh, kh, vh) = (g.gather(q, shape, split.clone())?, g.gather(k, shape, split.clone())?, g.gather(v, shape, split)?);
            let out = g.attention_core(qh, kh, vh)?;
            return g.gather(out, [n, c], merge);
        }

        let grid = WindowGrid::partition(h, w, cfg.window_size)?;
        let (hp, wp) = (grid.padded_height(), grid.padded_width());
        let pad = grid.pad_index(c);
        let win = grid.window_index(c, cfg.heads);
        let win_shape = [grid.num_windows() * cfg.heads, grid.points(), cfg.head_dim()];
        let g = &mut session.graph;
        let qp = g.gather(q, [hp * wp, c], pad.clone())?;
        let kp = g.gather(k, [hp * wp, c], pad.clone())?;
        let vp = g.gather(v, [hp * wp, c], pad.clone())?;
        let qw = g.gather(qp, win_shape, win.clone())?;
        let (kw, vw) = match cfg.variant {
            Variant::Window => (g.gather(kp, win_shape, win.clone())?, g.gather(vp, win_shape, win)?),
            _ => {
                let xp = g.gather(x, [hp * wp, c], pad)?;
                let xw = g.gather(xp, [grid.num_windows(), grid.points(), c], grid.window_feature_index(c))?;
                let rotate = cfg.variant.rotates();
                let streams: &[SampleStream] = match self.transform.len() {
                    1 => &[SampleStream::KeyValue],
                    2 => &[SampleStream::Key, SampleStream::Value],
                    n => return Err(Error::config(format!("{} layer holds {n} transform heads", cfg.variant))),
                };
                let mut coords = Vec::with_capacity(2);
                for (head, &stream) in self.transform.iter().zip(streams) {
                    let params = predict_on(session, xw, head, cfg.heads, rotate)?;
                    session.transforms.push(TransformTap {
                        layer: session.layer,
                        stream,
                        values: session.graph.value(params).clone(),
                        grid: grid.clone(),
                    });
                    coords.push(session.graph.transform_grid(params, &grid, cfg.heads)?);
                }
                let (ck, cv) = (coords[0], *coords.last().expect("at least one transform"));
                let g = &mut session.graph;
                (g.bilinear_sample(kp, ck, (hp, wp), true)?, g.bilinear_sample(vp, cv, (hp, wp), true)?)
            }
        };
        let g = &mut session.graph;
        let out = g.attention_core(qw, kw, vw)?;
        g.gather(out, [h * w, c], grid.merge_index(c, cfg.heads))
    }
}

/// `[h, n, C']` per-head views of an `n×C` matrix.
fn head_split_index(n: usize, c: usize, heads: usize) -> Arc<[Option<usize>]> {
    let d = c / heads;
    (0..heads)
        .flat_map(|j| (0..n).flat_map(move |t| (0..d).map(move |k| Some(t * c + j * d + k))))
        .collect()
}

fn head_merge_index(n: usize, c: usize, heads: usize) -> Arc<[Option<usize>]> {
    let d = c / heads;
    (0..n)
        .flat_map(|t| (0..heads).flat_map(move |j| (0..d).map(move |k| Some((j * n + t) * d + k))))
        .collect()
}

impl<T: Real> Graph<T> {
    /// Batched `softmax(Q·Kᵀ/√C')·V` over `[batch, n, C']` operands.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sq != sk || sq != sv {
            return Err(Error::dim(format!("attention operands {sq:?}, {sk:?}, {sv:?} differ")));
        }
        let d = sq[2];
        let logits = self.bmm(q, k, true)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(logits)?;
        self.bmm(weights, v, false)
    }
}

/// `softmax(Q·Kᵀ/√C')·V` for `n×C'` matrices.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let ok = q.rank() == 2 && q.shape() == k.shape() && q.shape() == v.shape();
    if !ok {
        return Err(Error::dim(format!(
            "scaled_dot_attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let shape3 = [1, q.shape()[0], q.shape()[1]];
    let mut g = Graph::new();
    let vars = [q, k, v].map(|t| g.leaf(t.clone().reshape(shape3).expect("same length")));
    let out = g.attention_core(vars[0], vars[1], vars[2])?;
    g.value(out).clone().reshape(q.shape().to_vec())
}

/// Applies `layer` to a `C×H×W` feature map; the result has the same shape.
pub fn attend<T: Real>(x: &Tensor<T>, layer: &AttentionLayer, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::dim(format!("feature map must be C×H×W, got {:?}", x.shape())));
    };
    if !x.all_finite() {
        return Err(Error::Evaluation("non-finite attention input".into()));
    }
    let mut session = Session::new(store, false);
    let tokens = crate::model::chw_to_tokens_var(&mut session.graph, x)?;
    debug_assert_eq!(session.graph.shape(tokens), [h * w, c]);
    let y = layer.forward(&mut session, tokens, (h, w))?;
    let y = session.graph.transpose(y)?;
    session.graph.value(y).clone().reshape([c, h, w])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn single_row_returns_v() {
        let q = Tensor::<f64>::from_rows(&[&[0.3, -2.0]]).unwrap();
        let v = Tensor::from_rows(&[&[7.0, 8.0]]).unwrap();
        assert_eq!(scaled_dot_attention(&q, &q, &v).unwrap().data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 3.0], &[2.0, 2.0]]).unwrap();
        let k = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 3.0], &[3.0, 3.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let q = Tensor::<f64>::zeros([2, 3]);
        let k = Tensor::zeros([2, 2]);
        assert!(matches!(scaled_dot_attention(&q, &k, &k), Err(Error::Dimension(_))));
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(AttentionConfig::new(10, 3, 7, Variant::Rvsa), Err(Error::Config(_))));
    }

    #[test]
    fn transform_head_count_by_variant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Variant::ALL {
            let layer = AttentionLayer::new(&mut store, &v.to_string(), AttentionConfig::new(8, 2, 3, v).unwrap(), &mut rng).unwrap();
            assert_eq!(layer.transform.len(), v.transform_heads());
        }
    }

    #[test]
    fn variants_preserve_shape_on_padded_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([8, 5, 6], 1.0, &mut rng);
        for v in Variant::ALL {
            let mut store = ParamStore::new();
            let layer = AttentionLayer::new(&mut store, "a", AttentionConfig::new(8, 2, 4, v).unwrap(), &mut rng).unwrap();
            let y = attend(&x, &layer, &store).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("swin".parse::<Variant>().is_err());
    }
}
