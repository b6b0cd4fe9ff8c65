use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Init, LinearLayer, ParamStore, Real, Session, Tensor, Var};

/// Non-overlapping `p×p` patches of a `C_in×H×W` image, linearly mapped to `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub proj: LinearLayer,
    pub patch_size: usize,
    pub in_channels: usize,
}

/// Gather index from `C_in×H×W` pixels to `[tokens, p·p·C_in]` patch rows,
/// each row ordered `(py, px, channel)`.
fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Arc<[Option<usize>]> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        idx.push(Some((ch * h + ty * p + py) * w + tx * p + px));
                    }
                }
            }
        }
    }
    idx.into()
}

fn token_grid(shape: &[usize], p: usize) -> Result<(usize, usize, usize)> {
    let [c, h, w] = *shape else {
        return Err(Error::dim(format!("image must be C×H×W, got {shape:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
    }
    Ok((c, h / p, w / p))
}

/// Rows of flattened patches, `[tokens, p·p·C_in]`.
pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, gh, gw) = token_grid(image.shape(), p)?;
    let idx = patch_index(c, gh * p, gw * p, p);
    let src = image.data();
    Tensor::new([gh * gw, p * p * c], idx.iter().map(|i| src[i.expect("dense index")]).collect())
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        patch_size: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let proj = LinearLayer::new(store, name, patch_size * patch_size * in_channels, embed_dim, Init::XavierUniform, rng)?;
        Ok(Self { proj, patch_size, in_channels })
    }

    /// Token-major embedding `[tokens, C]` and the token grid `(rows, cols)`.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, image: Var) -> Result<(Var, (usize, usize))> {
        let p = self.patch_size;
        let (c, gh, gw) = token_grid(session.graph.shape(image), p)?;
        if c != self.in_channels {
            return Err(Error::dim(format!("patch embedding expects {} channels, got {c}", self.in_channels)));
        }
        let patches = session.graph.gather(image, [gh * gw, p * p * c], patch_index(c, gh * p, gw * p, p))?;
        Ok((self.proj.forward(session, patches)?, (gh, gw)))
    }
}

/// Applies a patch embedding to one image; the result is `C×(H/p)×(W/p)`.
pub fn patch_embed<T: Real>(image: &Tensor<T>, embed: &PatchEmbed, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut session = Session::new(store, false);
    let x = session.graph.leaf(image.clone());
    let (tokens, (gh, gw)) = embed.forward(&mut session, x)?;
    let t = session.graph.transpose(tokens)?;
    session.graph.value(t).clone().reshape([embed.proj.out_dim, gh, gw])
}

/// Fixed 2-D sine-cosine table, token-major `[H·W, C]`. The first half of
/// the channels encodes the row, the second half the column, each as
/// `[sin(pos·ω_k), cos(pos·ω_k)]` with `ω_k = 10000^(-k/(C/4))`.
pub fn sincos_tokens<T: Real>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::config(format!("sin-cos encoding needs a dimension divisible by 4, got {c}")));
    }
    let quarter = c / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                data.extend(omega.iter().map(|o| T::lit((pos * o).sin())));
                data.extend(omega.iter().map(|o| T::lit((pos * o).cos())));
            }
        }
    }
    Tensor::new([h * w, c], data)
}

/// The same table as a `C×H×W` feature map.
pub fn sincos_encoding<T: Real>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    let t = sincos_tokens::<T>(h, w, c)?;
    let src = t.data();
    let n = h * w;
    Ok(Tensor::from_fn([c, h, w], |i| src[(i % n) * c + i / n]))
}
