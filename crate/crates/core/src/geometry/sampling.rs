use super::transform::SampleGrid;
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Extents of a bilinear gather from a token-major `(H·W)×C` feature matrix
/// at `[windows, heads, points, 2]` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SampleLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub windows: usize,
    pub heads: usize,
    pub points: usize,
    /// Head `j` reads channel slice `j·C/h..(j+1)·C/h`; otherwise every head reads all channels.
    pub split_heads: bool,
}

impl SampleLayout {
    pub fn head_channels(&self) -> usize {
        if self.split_heads {
            self.channels / self.heads
        } else {
            self.channels
        }
    }

    fn channel_offset(&self, head: usize) -> usize {
        if self.split_heads {
            head * self.head_channels()
        } else {
            0
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.windows * self.heads, self.points, self.head_channels()]
    }
}

/// The four integer neighbours of `(x, y)` with their bilinear weights, in
/// the order `(x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)`. Neighbours
/// outside the grid carry `None` and act as zero-valued features.
pub(crate) fn neighbours<T: Real>(x: T, y: T, height: usize, width: usize) -> ([Option<usize>; 4], [T; 4], T, T) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let one = T::one();
    let weights = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
    let at = |dx: i64, dy: i64| -> Option<usize> {
        let xi = x0.to_i64()?.checked_add(dx)?;
        let yi = y0.to_i64()?.checked_add(dy)?;
        let inside = (0..width as i64).contains(&xi) && (0..height as i64).contains(&yi);
        inside.then(|| yi as usize * width + xi as usize)
    };
    ([at(0, 0), at(1, 0), at(0, 1), at(1, 1)], weights, fx, fy)
}

fn check_coords<T: Real>(coords: &[T]) -> Result<()> {
    if let Some(i) = coords.iter().position(|c| c.is_nan()) {
        return Err(Error::Evaluation(format!("NaN sampling coordinate at flat index {i}")));
    }
    if coords.iter().any(|c| c.is_infinite()) {
        return Err(Error::Evaluation("infinite sampling coordinate".into()));
    }
    Ok(())
}

/// Writes `[windows·heads, points, head_channels]` samples into `out`.
/// `weight_bias` is added to the `(x0, y0)` weight; it is zero except when
/// the verification suite injects a fault.
pub(crate) fn bilinear_forward<T: Real>(
    feature: &[T],
    coords: &[T],
    layout: &SampleLayout,
    weight_bias: T,
    out: &mut [T],
) {
    let (c, hc) = (layout.channels, layout.head_channels());
    for w in 0..layout.windows {
        for j in 0..layout.heads {
            let off = layout.channel_offset(j);
            for p in 0..layout.points {
                let slot = (w * layout.heads + j) * layout.points + p;
                let (x, y) = (coords[2 * slot], coords[2 * slot + 1]);
                let (idx, mut wts, _, _) = neighbours(x, y, layout.height, layout.width);
                wts[0] = wts[0] + weight_bias;
                let dst = &mut out[slot * hc..(slot + 1) * hc];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for (n, wt) in idx.iter().zip(wts) {
                    if let Some(t) = *n {
                        let src = &feature[t * c + off..t * c + off + hc];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wt * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients wrt the feature matrix and/or the coordinates.
pub(crate) fn bilinear_backward<T: Real>(
    feature: &[T],
    coords: &[T],
    layout: &SampleLayout,
    grad_out: &[T],
    mut grad_feature: Option<&mut [T]>,
    mut grad_coords: Option<&mut [T]>,
) {
    let (c, hc) = (layout.channels, layout.head_channels());
    let zeros = vec![T::zero(); hc];
    for w in 0..layout.windows {
        for j in 0..layout.heads {
            let off = layout.channel_offset(j);
            for p in 0..layout.points {
                let slot = (w * layout.heads + j) * layout.points + p;
                let (x, y) = (coords[2 * slot], coords[2 * slot + 1]);
                let (idx, wts, fx, fy) = neighbours(x, y, layout.height, layout.width);
                let g = &grad_out[slot * hc..(slot + 1) * hc];
                if let Some(gf) = grad_feature.as_deref_mut() {
                    for (n, wt) in idx.iter().zip(wts) {
                        if let Some(t) = *n {
                            let dst = &mut gf[t * c + off..t * c + off + hc];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d = *d + wt * gv;
                            }
                        }
                    }
                }
                if let Some(gc) = grad_coords.as_deref_mut() {
                    let v = idx.map(|n| n.map_or(&zeros[..], |t| &feature[t * c + off..t * c + off + hc]));
                    let one = T::one();
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for k in 0..hc {
                        let (v00, v10, v01, v11) = (v[0][k], v[1][k], v[2][k], v[3][k]);
                        dx = dx + g[k] * ((one - fy) * (v10 - v00) + fy * (v11 - v01));
                        dy = dy + g[k] * ((one - fx) * (v01 - v00) + fx * (v11 - v10));
                    }
                    gc[2 * slot] = gc[2 * slot] + dx;
                    gc[2 * slot + 1] = gc[2 * slot + 1] + dy;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Bilinear sampling of a token-major `(height·width)×C` feature matrix at
    /// `[windows, heads, points, 2]` coordinates, zero outside the grid.
    ///
    /// With `split_heads` head `j` samples its own channel slice and the
    /// result is `[windows·heads, points, C/heads]`; otherwise every head
    /// samples all channels. Differentiable wrt features and coordinates.
    pub fn bilinear_sample(
        &mut self,
        feature: Var,
        coords: Var,
        (height, width): (usize, usize),
        split_heads: bool,
    ) -> Result<Var> {
        let (sf, sc) = (self.shape(feature).to_vec(), self.shape(coords).to_vec());
        if sf.len() != 2 || sf[0] != height * width || sc.len() != 4 || sc[3] != 2 {
            return Err(Error::dim(format!(
                "bilinear_sample: feature {sf:?} for a {height}x{width} grid with coordinates {sc:?}"
            )));
        }
        let layout = SampleLayout {
            height,
            width,
            channels: sf[1],
            windows: sc[0],
            heads: sc[1],
            points: sc[2],
            split_heads,
        };
        if split_heads && !layout.channels.is_multiple_of(layout.heads) {
            return Err(Error::config(format!("{} channels do not split into {} heads", layout.channels, layout.heads)));
        }
        check_coords(self.value(coords).data())?;
        let shape = layout.output_shape();
        let mut out = vec![T::zero(); shape.iter().product()];
        bilinear_forward(self.value(feature).data(), self.value(coords).data(), &layout, T::zero(), &mut out);
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Bilinear { feature, coords, layout }))
    }
}

/// Samples a `C×H_p×W_p` feature map at every grid coordinate; the result
/// is `[windows, heads, points, C]`.
pub fn bilinear_sample(feature: &Tensor<f64>, grid: &SampleGrid) -> Result<Tensor<f64>> {
    sample_with_bias(feature, grid, 0.0)
}

pub(crate) fn sample_with_bias(feature: &Tensor<f64>, grid: &SampleGrid, weight_bias: f64) -> Result<Tensor<f64>> {
    let [c, h, w] = *feature.shape() else {
        return Err(Error::dim(format!("feature map must be C×H×W, got {:?}", feature.shape())));
    };
    let coords: Tensor<f64> = grid.to_tensor();
    check_coords(coords.data())?;
    let tokens = chw_to_tokens(feature);
    let layout = SampleLayout {
        height: h,
        width: w,
        channels: c,
        windows: grid.windows,
        heads: grid.heads,
        points: grid.points,
        split_heads: false,
    };
    let mut out = vec![0.0; grid.windows * grid.heads * grid.points * c];
    bilinear_forward(&tokens, coords.data(), &layout, weight_bias, &mut out);
    Tensor::new(vec![grid.windows, grid.heads, grid.points, c], out)
}

/// `C×H×W` to token-major `(H·W)×C` data.
pub(crate) fn chw_to_tokens<T: Real>(feature: &Tensor<T>) -> Vec<T> {
    let s = feature.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let src = feature.data();
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        for t in 0..hw {
            out[t * c + ch] = src[ch * hw + t];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_of(points: &[(f64, f64)]) -> SampleGrid {
        SampleGrid { windows: 1, heads: 1, points: points.len(), coords: points.to_vec() }
    }

    fn map_2x2() -> Tensor<f64> {
        Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let out = bilinear_sample(&map_2x2(), &grid_of(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn center_of_four_is_their_mean() {
        let out = bilinear_sample(&map_2x2(), &grid_of(&[(0.5, 0.5)])).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn far_outside_is_zero() {
        let out = bilinear_sample(&map_2x2(), &grid_of(&[(-10.0, -10.0), (1e300, 0.0)])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn border_blends_with_zero_padding() {
        // halfway between the last column and the virtual zero column
        let out = bilinear_sample(&map_2x2(), &grid_of(&[(1.5, 0.0)])).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn nan_coordinate_is_evaluation_error() {
        let r = bilinear_sample(&map_2x2(), &grid_of(&[(f64::NAN, 0.0)]));
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
