//! Raw loops shared by the forward and backward passes of tape operations.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 15;

/// Operand layout of a batched product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// `a[b, m, k] · b[b, k, n]`
    NN,
    /// `a[b, m, k] · b[b, n, k]ᵀ`
    NT,
    /// `a[b, k, m]ᵀ · b[b, k, n]`
    TN,
}

/// Batched product writing `out[b, m, n]` (overwritten).
pub(crate) fn bmm<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    layout: Layout,
) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    debug_assert_eq!(out.len(), batch * m * n);
    if out.is_empty() {
        return;
    }
    let row = |(r, out_row): (usize, &mut [T])| {
        let bi = r / m;
        let i = r % m;
        let a_mat = &a[bi * m * k..(bi + 1) * m * k];
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        out_row.iter_mut().for_each(|v| *v = T::zero());
        match layout {
            Layout::NN => {
                let a_row = &a_mat[i * k..(i + 1) * k];
                for (t, &av) in a_row.iter().enumerate() {
                    let b_row = &b_mat[t * n..(t + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o = *o + av * bv;
                    }
                }
            }
            Layout::NT => {
                let a_row = &a_mat[i * k..(i + 1) * k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let b_row = &b_mat[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in a_row.iter().zip(b_row) {
                        acc = acc + x * y;
                    }
                    *o = acc;
                }
            }
            Layout::TN => {
                for t in 0..k {
                    let av = a_mat[t * m + i];
                    let b_row = &b_mat[t * n..(t + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
    };
    if batch * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Softmax over contiguous slices of length `n`, with max subtraction.
pub(crate) fn softmax_rows<T: Real>(x: &[T], out: &mut [T], n: usize) {
    for (xs, ys) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (y, &v) in ys.iter_mut().zip(xs) {
            *y = (v - max).exp();
            total = total + *y;
        }
        for y in ys.iter_mut() {
            *y = *y / total;
        }
    }
}

/// Geometry of a stride-1 grouped cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub groups: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Input channel index and kernel base offset for `(co, cil)`.
    fn taps(&self, co: usize, cil: usize) -> (usize, usize) {
        let g = co / self.out_per_group();
        let ci = g * self.in_per_group() + cil;
        let base = (co * self.in_per_group() + cil) * self.kernel * self.kernel;
        (ci, base)
    }

    /// Valid output range along one axis for kernel tap `kk`.
    fn span(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // input = out + kk - pad must lie in [0, extent)
        let lo = self.pad.saturating_sub(kk);
        let hi = (extent + self.pad).saturating_sub(kk).min(out_extent);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], s: &ConvShape, out: &mut [T]) {
    let (oh, ow) = (s.out_height(), s.out_width());
    let (h, wd, k) = (s.height, s.width, s.kernel);
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
        plane.iter_mut().for_each(|v| *v = T::zero());
        for cil in 0..s.in_per_group() {
            let (ci, base) = s.taps(co, cil);
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = s.span(ky, h, oh);
                for kx in 0..k {
                    let wv = w[base + ky * k + kx];
                    let (x0, x1) = s.span(kx, wd, ow);
                    for oy in y0..y1 {
                        let iy = oy + ky - s.pad;
                        let src = &xin[iy * wd..(iy + 1) * wd];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            dst[ox] = dst[ox] + wv * src[ox + kx - s.pad];
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates gradients into `gx` and `gw` (either may be skipped).
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    s: &ConvShape,
    gy: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let (oh, ow) = (s.out_height(), s.out_width());
    let (h, wd, k) = (s.height, s.width, s.kernel);
    if let Some(gx) = gx {
        for co in 0..s.out_channels {
            let gplane = &gy[co * oh * ow..(co + 1) * oh * ow];
            for cil in 0..s.in_per_group() {
                let (ci, base) = s.taps(co, cil);
                let gin = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    let (y0, y1) = s.span(ky, h, oh);
                    for kx in 0..k {
                        let wv = w[base + ky * k + kx];
                        let (x0, x1) = s.span(kx, wd, ow);
                        for oy in y0..y1 {
                            let iy = oy + ky - s.pad;
                            for ox in x0..x1 {
                                let ix = ox + kx - s.pad;
                                gin[iy * wd + ix] = gin[iy * wd + ix] + wv * gplane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for co in 0..s.out_channels {
            let gplane = &gy[co * oh * ow..(co + 1) * oh * ow];
            for cil in 0..s.in_per_group() {
                let (ci, base) = s.taps(co, cil);
                let xin = &x[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    let (y0, y1) = s.span(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = s.span(kx, wd, ow);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - s.pad;
                            for ox in x0..x1 {
                                acc = acc + xin[iy * wd + ox + kx - s.pad] * gplane[oy * ow + ox];
                            }
                        }
                        gw[base + ky * k + kx] = gw[base + ky * k + kx] + acc;
                    }
                }
            }
        }
    }
}
