use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::partition::WindowGrid;
use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Activation, Graph, LinearLayer, ParamStore, Real, Session, Tensor, Var};

/// Slope of the leaky ReLU between window pooling and the prediction head.
pub const PREDICTOR_SLOPE: f64 = 0.01;

/// Number of predicted values per head: `ds_x, ds_y, o_x, o_y, θ`.
pub const PARAMS_PER_HEAD: usize = 5;

/// Scale, offset and rotation of one window in one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub theta: f64,
}

impl WindowParams {
    pub const IDENTITY: Self = Self { scale_x: 1.0, scale_y: 1.0, offset_x: 0.0, offset_y: 0.0, theta: 0.0 };

    /// Image of a center-relative point: `o + R(θ)·(x·s_x, y·s_y)` with
    /// `R(θ) = [[cos θ, sin θ], [-sin θ, cos θ]]`.
    pub fn apply(&self, (rx, ry): (f64, f64)) -> (f64, f64) {
        let (sin, cos) = self.theta.sin_cos();
        let (a, b) = (rx * self.scale_x, ry * self.scale_y);
        (self.offset_x + (cos * a + sin * b), self.offset_y + (-sin * a + cos * b))
    }
}

/// Per-window, per-head transform parameters, window-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTransform {
    pub windows: usize,
    pub heads: usize,
    pub params: Vec<WindowParams>,
}

impl WindowTransform {
    pub fn identity(windows: usize, heads: usize) -> Self {
        Self { windows, heads, params: vec![WindowParams::IDENTITY; windows * heads] }
    }

    pub fn get(&self, window: usize, head: usize) -> &WindowParams {
        &self.params[window * self.heads + head]
    }

    pub fn get_mut(&mut self, window: usize, head: usize) -> &mut WindowParams {
        &mut self.params[window * self.heads + head]
    }

    /// Reads a `[windows, heads, 5]` tensor of `(s_x, s_y, o_x, o_y, θ)`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != PARAMS_PER_HEAD {
            return Err(Error::dim(format!("transform tensor must be [windows, heads, 5], got {s:?}")));
        }
        let params = t
            .data()
            .chunks(PARAMS_PER_HEAD)
            .map(|p| WindowParams {
                scale_x: p[0].as_f64(),
                scale_y: p[1].as_f64(),
                offset_x: p[2].as_f64(),
                offset_y: p[3].as_f64(),
                theta: p[4].as_f64(),
            })
            .collect();
        Ok(Self { windows: s[0], heads: s[1], params })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .params
            .iter()
            .flat_map(|p| [p.scale_x, p.scale_y, p.offset_x, p.offset_y, p.theta])
            .map(T::lit)
            .collect();
        Tensor::new(vec![self.windows, self.heads, PARAMS_PER_HEAD], data).expect("consistent extents")
    }
}

/// Fractional sampling coordinates: `s²` points per window per head.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub windows: usize,
    pub heads: usize,
    pub points: usize,
    pub coords: Vec<(f64, f64)>,
}

impl SampleGrid {
    pub fn get(&self, window: usize, head: usize, point: usize) -> (f64, f64) {
        self.coords[(window * self.heads + head) * self.points + point]
    }

    /// `[windows, heads, points, 2]` tensor of `(x, y)`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.coords.iter().flat_map(|&(x, y)| [T::lit(x), T::lit(y)]).collect();
        Tensor::new(vec![self.windows, self.heads, self.points, 2], data).expect("consistent extents")
    }
}

/// Fixed geometry consumed by the grid-transform tape operation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GridLayout {
    pub windows: usize,
    pub heads: usize,
    pub centers: Vec<(f64, f64)>,
    pub rel: Vec<(f64, f64)>,
}

impl GridLayout {
    pub fn new(grid: &WindowGrid, heads: usize) -> Self {
        Self { windows: grid.num_windows(), heads, centers: grid.centers(), rel: grid.relative_offsets() }
    }
}

pub(crate) fn transform_forward<T: Real>(params: &[T], layout: &GridLayout, out: &mut [T]) {
    let points = layout.rel.len();
    for w in 0..layout.windows {
        let (cx, cy) = layout.centers[w];
        let (cx, cy) = (T::lit(cx), T::lit(cy));
        for j in 0..layout.heads {
            let base = (w * layout.heads + j) * PARAMS_PER_HEAD;
            let p = &params[base..base + PARAMS_PER_HEAD];
            let (sx, sy, ox, oy) = (p[0], p[1], p[2], p[3]);
            let (sin, cos) = p[4].sin_cos();
            let dst = &mut out[(w * layout.heads + j) * points * 2..][..points * 2];
            for (q, &(rx, ry)) in layout.rel.iter().enumerate() {
                let a = T::lit(rx) * sx;
                let b = T::lit(ry) * sy;
                dst[2 * q] = (cx + ox) + (cos * a + sin * b);
                dst[2 * q + 1] = (cy + oy) + (-sin * a + cos * b);
            }
        }
    }
}

pub(crate) fn transform_backward<T: Real>(params: &[T], layout: &GridLayout, grad_out: &[T], grad: &mut [T]) {
    let points = layout.rel.len();
    for wj in 0..layout.windows * layout.heads {
        let base = wj * PARAMS_PER_HEAD;
        let p = &params[base..base + PARAMS_PER_HEAD];
        let (sx, sy) = (p[0], p[1]);
        let (sin, cos) = p[4].sin_cos();
        let go = &grad_out[wj * points * 2..][..points * 2];
        let mut acc = [T::zero(); PARAMS_PER_HEAD];
        for (q, &(rx, ry)) in layout.rel.iter().enumerate() {
            let (gx, gy) = (go[2 * q], go[2 * q + 1]);
            let (rx, ry) = (T::lit(rx), T::lit(ry));
            let (a, b) = (rx * sx, ry * sy);
            acc[0] = acc[0] + gx * cos * rx - gy * sin * rx;
            acc[1] = acc[1] + gx * sin * ry + gy * cos * ry;
            acc[2] = acc[2] + gx;
            acc[3] = acc[3] + gy;
            acc[4] = acc[4] + gx * (-sin * a + cos * b) + gy * (-cos * a - sin * b);
        }
        for (g, a) in grad[base..base + PARAMS_PER_HEAD].iter_mut().zip(acc) {
            *g = *g + a;
        }
    }
}

impl<T: Real> Graph<T> {
    /// Maps `[windows, heads, 5]` transform parameters to `[windows, heads, s², 2]`
    /// sampling coordinates of the given window grid.
    pub fn transform_grid(&mut self, params: Var, grid: &WindowGrid, heads: usize) -> Result<Var> {
        let layout = GridLayout::new(grid, heads);
        let expect = [layout.windows, heads, PARAMS_PER_HEAD];
        if self.shape(params) != expect {
            return Err(Error::dim(format!(
                "transform parameters {:?} do not match grid extents {expect:?}",
                self.shape(params)
            )));
        }
        let points = layout.rel.len();
        let mut out = vec![T::zero(); layout.windows * heads * points * 2];
        transform_forward(self.value(params).data(), &layout, &mut out);
        let value = Tensor::new(vec![layout.windows, heads, points, 2], out)?;
        Ok(self.record(value, Op::TransformGrid { params, layout: Arc::new(layout) }))
    }
}

/// Applies per-window transforms to the default lattice of `grid`.
pub fn transform_grid(grid: &WindowGrid, transform: &WindowTransform) -> Result<SampleGrid> {
    if transform.windows != grid.num_windows() || transform.params.len() != transform.windows * transform.heads {
        return Err(Error::dim(format!(
            "transform covers {} windows, grid has {}",
            transform.windows,
            grid.num_windows()
        )));
    }
    let layout = GridLayout::new(grid, transform.heads);
    let params: Tensor<f64> = transform.to_tensor();
    let mut out = vec![0.0; layout.windows * layout.heads * layout.rel.len() * 2];
    transform_forward(params.data(), &layout, &mut out);
    Ok(SampleGrid {
        windows: layout.windows,
        heads: layout.heads,
        points: layout.rel.len(),
        coords: out.chunks(2).map(|c| (c[0], c[1])).collect(),
    })
}

/// Records the prediction head on the tape: window pooling, leaky ReLU,
/// linear map to `5h`, then `s = 1 + ds`. When `rotate` is false the
/// angle is pinned to zero. Input is `[windows, s², C]`; output `[windows, h, 5]`.
pub(crate) fn predict_on<T: Real>(
    session: &mut Session<'_, T>,
    window_features: Var,
    head: &LinearLayer,
    heads: usize,
    rotate: bool,
) -> Result<Var> {
    if head.out_dim != PARAMS_PER_HEAD * heads {
        return Err(Error::config(format!(
            "prediction head emits {} values, expected 5·{heads} = {}",
            head.out_dim,
            PARAMS_PER_HEAD * heads
        )));
    }
    let windows = session.graph.shape(window_features)[0];
    let g = &mut session.graph;
    let pooled = g.mean_axis(window_features, 1)?;
    let act = g.activation(pooled, Activation::LeakyRelu(PREDICTOR_SLOPE));
    let raw = head.forward(session, act)?;
    let g = &mut session.graph;
    let mut raw = g.reshape(raw, [windows, heads, PARAMS_PER_HEAD])?;
    if !rotate {
        let mask = g.leaf(Tensor::new([PARAMS_PER_HEAD], [1.0, 1.0, 1.0, 1.0, 0.0].map(T::lit).to_vec())?);
        raw = g.mul_row(raw, mask)?;
    }
    let unit_scale = g.leaf(Tensor::new([PARAMS_PER_HEAD], [1.0, 1.0, 0.0, 0.0, 0.0].map(T::lit).to_vec())?);
    g.add_row(raw, unit_scale)
}

/// Predicts window transforms from window features `[windows, C, s, s]`
/// (or a single `[C, s, s]` window).
pub fn predict_transform(
    window_features: &Tensor<f64>,
    head: &LinearLayer,
    store: &ParamStore<f64>,
    heads: usize,
    variant: Variant,
) -> Result<WindowTransform> {
    let rotate = match variant {
        Variant::Vsa => false,
        Variant::Rvsa | Variant::RvsaDecoupled => true,
        other => return Err(Error::config(format!("{other} attention has no transform head"))),
    };
    let s = window_features.shape();
    let (windows, c, h, w) = match *s {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim(format!("window features must be [windows, C, s, s], got {s:?}"))),
    };
    if head.in_dim != c {
        return Err(Error::dim(format!("prediction head expects {} channels, got {c}", head.in_dim)));
    }
    // [windows, C, s·s] -> [windows, s·s, C]
    let src = window_features.data();
    let points = h * w;
    let mut data = vec![0.0; windows * points * c];
    for n in 0..windows {
        for ch in 0..c {
            for p in 0..points {
                data[(n * points + p) * c + ch] = src[(n * c + ch) * points + p];
            }
        }
    }
    let mut session = Session::new(store, false);
    let x = session.graph.leaf(Tensor::new([windows, points, c], data)?);
    let out = predict_on(&mut session, x, head, heads, rotate)?;
    WindowTransform::from_tensor(session.graph.value(out))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Init;

    #[test]
    fn identity_transform_reproduces_token_positions() {
        let grid = WindowGrid::partition(10, 13, 4).unwrap();
        let sg = transform_grid(&grid, &WindowTransform::identity(grid.num_windows(), 3)).unwrap();
        assert_eq!(sg.coords.len(), grid.num_windows() * 3 * 16);
        for w in 0..grid.num_windows() {
            for j in 0..3 {
                for p in 0..16 {
                    let t = grid.token(w, p);
                    let (x, y) = sg.get(w, j, p);
                    assert_eq!((x, y), ((t % grid.padded_width()) as f64, (t / grid.padded_width()) as f64));
                }
            }
        }
    }

    #[test]
    fn quarter_turn_maps_corner() {
        let p = WindowParams { theta: FRAC_PI_2, ..WindowParams::IDENTITY };
        let (x, y) = p.apply((3.0, 3.0));
        assert!((x - 3.0).abs() < 1e-12 && (y + 3.0).abs() < 1e-12, "({x}, {y})");
    }

    #[test]
    fn scale_two_with_offset() {
        let grid = WindowGrid::partition(7, 7, 7).unwrap();
        let mut t = WindowTransform::identity(1, 1);
        *t.get_mut(0, 0) = WindowParams { scale_x: 2.0, scale_y: 2.0, offset_x: 1.0, ..WindowParams::IDENTITY };
        let sg = transform_grid(&grid, &t).unwrap();
        // last lattice point is the (3, 3) corner relative to center (3, 3)
        let (x, y) = sg.get(0, 0, 48);
        assert_eq!((x - 3.0, y - 3.0), (7.0, 6.0));
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let grid = WindowGrid::partition(14, 14, 7).unwrap();
        let t = WindowTransform::identity(3, 1);
        assert!(matches!(transform_grid(&grid, &t), Err(Error::Dimension(_))));
    }

    fn head(store: &mut ParamStore<f64>, c: usize, h: usize, init: Init) -> LinearLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        LinearLayer::new(store, "head", c, 5 * h, init, &mut rng).unwrap()
    }

    #[test]
    fn zero_head_predicts_identity() {
        let mut store = ParamStore::new();
        let head = head(&mut store, 4, 2, Init::Zeros);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([3, 4, 2, 2], 1.0, &mut rng);
        let t = predict_transform(&x, &head, &store, 2, Variant::Rvsa).unwrap();
        assert!(t.params.iter().all(|p| *p == WindowParams::IDENTITY));
    }

    #[test]
    fn bias_passes_through_with_zero_weights() {
        let mut store = ParamStore::new();
        let head = head(&mut store, 4, 1, Init::Zeros);
        store.get_mut(head.bias).data_mut().copy_from_slice(&[0.5, 0.0, 1.0, -1.0, FRAC_PI_4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
        let t = predict_transform(&x, &head, &store, 1, Variant::Rvsa).unwrap();
        for p in &t.params {
            assert_eq!(*p, WindowParams { scale_x: 1.5, scale_y: 1.0, offset_x: 1.0, offset_y: -1.0, theta: FRAC_PI_4 });
        }
        let t = predict_transform(&x, &head, &store, 1, Variant::Vsa).unwrap();
        assert_eq!(t.params[0].theta, 0.0);
    }

    #[test]
    fn wrong_head_width_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = LinearLayer::new(&mut store, "head", 4, 7, Init::Zeros, &mut rng).unwrap();
        let x = Tensor::zeros([1, 4, 2, 2]);
        assert!(matches!(predict_transform(&x, &head, &store, 1, Variant::Rvsa), Err(Error::Config(_))));
        let head = LinearLayer::new(&mut store, "head2", 4, 5, Init::Zeros, &mut rng).unwrap();
        assert!(matches!(predict_transform(&x, &head, &store, 1, Variant::Window), Err(Error::Config(_))));
    }
}
