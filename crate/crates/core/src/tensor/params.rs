use std::collections::HashMap;

use rand::Rng;

use super::{BatchStats, Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::SampleStream;

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named model tensors: trainable parameters plus non-trainable buffers
/// such as batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f64> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name, value, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Swaps a tensor for one of a different shape, keeping its id and name.
    pub(crate) fn replace(&mut self, id: ParamId, value: Tensor<T>) {
        self.entries[id.0].value = value;
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// A batch-norm layer's statistics observed during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct StatsUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch: BatchStats<T>,
}

/// A transform predicted by one attention layer during a forward pass.
#[derive(Debug, Clone)]
pub struct TransformTap<T> {
    pub layer: usize,
    pub stream: SampleStream,
    /// `[windows, heads, 5]` of `(s_x, s_y, o_x, o_y, θ)`
    pub values: Tensor<T>,
    pub grid: crate::geometry::WindowGrid,
}

/// One forward pass: the tape plus bindings from store parameters to
/// tape leaves. Parameters are bound lazily on first use, so a fresh
/// session records exactly what the pass touches.
pub struct Session<'s, T: Real = f64> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    training: bool,
    /// Index of the block being evaluated, for geometry taps.
    pub layer: usize,
    pub stats_updates: Vec<StatsUpdate<T>>,
    pub transforms: Vec<TransformTap<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Self::with_graph(Graph::new(), store, training)
    }

    pub fn with_graph(graph: Graph<T>, store: &'s ParamStore<T>, training: bool) -> Self {
        Self {
            graph,
            store,
            bound: HashMap::new(),
            training,
            layer: 0,
            stats_updates: Vec::new(),
            transforms: Vec::new(),
        }
    }

    /// Runs `f` on a session that borrows `graph`; the graph (with
    /// everything `f` recorded) is handed back afterwards.
    pub fn within<R>(
        graph: &mut Graph<T>,
        store: &'s ParamStore<T>,
        training: bool,
        f: impl FnOnce(&mut Session<'s, T>) -> Result<R>,
    ) -> Result<R> {
        let mut session = Session::with_graph(std::mem::take(graph), store, training);
        let out = f(&mut session);
        *graph = session.graph;
        out
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Tape leaf for a stored tensor.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Makes `var` stand in for a stored tensor in this pass.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.graph.shape(var) != self.store.get(id).shape() {
            return Err(Error::dim(format!(
                "binding {:?} to parameter {} of shape {:?}",
                self.graph.shape(var),
                self.store.name(id),
                self.store.get(id).shape()
            )));
        }
        self.bound.insert(id, var);
        Ok(())
    }

    /// Gradients of every trainable parameter bound in this pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(id, _)| self.store.is_trainable(**id))
            .map(|(&id, &v)| (id, grads.wrt(&self.graph, v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// uniform in `±sqrt(6 / (fan_in + fan_out))`
    XavierUniform,
}

impl Init {
    pub fn tensor<T: Real>(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
            Init::XavierUniform => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape.to_vec(), -a, a, rng)
            }
        }
    }
}

/// Affine map `x·Wᵀ + b` over the last axis; `W` is `out_dim × in_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Registers `<name>.weight` (initialized with `init`) and a zero `<name>.bias`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config(format!("linear layer {name} needs positive dims, got {in_dim}->{out_dim}")));
        }
        let weight = store.insert(format!("{name}.weight"), init.tensor(&[out_dim, in_dim], in_dim, out_dim, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// Applies the layer to `x[.., in_dim]`.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = session.graph.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim(format!("linear layer expects last dim {}, got {shape:?}", self.in_dim)));
        }
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let (w, b) = (session.param(self.weight), session.param(self.bias));
        let g = &mut session.graph;
        let x3 = g.reshape(x, [1, rows, self.in_dim])?;
        let w3 = g.reshape(w, [1, self.out_dim, self.in_dim])?;
        let y = g.bmm(x3, w3, true)?;
        let y = g.add_row(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty shape") = self.out_dim;
        g.reshape(y, out_shape)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn linear_forward_matches_manual_product() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = LinearLayer::new(&mut store, "fc", 2, 3, Init::Zeros, &mut rng).unwrap();
        store.get_mut(lin.weight).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        store.get_mut(lin.bias).data_mut().copy_from_slice(&[0.5, 0.0, -1.0]);
        let mut s = Session::new(&store, false);
        let x = s.graph.leaf(Tensor::new([1, 2], vec![1.0, -1.0]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.value(y).data(), &[-0.5, -1.0, -2.0]);
    }

    #[test]
    fn zero_dims_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LinearLayer::new(&mut store, "fc", 0, 3, Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn param_grads_cover_bound_trainables_only() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::full([2], 2.0));
        let buf = store.insert_buffer("buf", Tensor::full([2], 1.0));
        let mut s = Session::new(&store, true);
        let (va, vb) = (s.param(a), s.param(buf));
        let y = s.graph.mul(va, vb).unwrap();
        let y = s.graph.sum(y);
        let grads = s.graph.backward(y).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, a);
        assert_eq!(pg[0].1.data(), &[1.0, 1.0]);
    }
}
