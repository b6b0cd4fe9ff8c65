use crate::error::Result;
use crate::tensor::{BatchStats, ParamId, ParamStore, Real, Session, StatsUpdate, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.insert(format!("{name}.gain"), Tensor::full([dim], T::one()));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([dim]));
        Self { gain, bias, dim }
    }

    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (session.param(self.gain), session.param(self.bias));
        session.graph.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Batch normalization over the rows of an `N×C` matrix, with running
/// statistics kept as store buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full([dim], T::one())),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([dim])),
            running_mean: store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros([dim])),
            running_var: store.insert_buffer(format!("{name}.running_var"), Tensor::full([dim], T::one())),
            dim,
        }
    }

    /// Batch statistics while training (recorded for a later running-stat
    /// update), running statistics otherwise.
    pub fn forward<T: Real>(&self, session: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (session.param(self.gain), session.param(self.bias));
        if session.training() {
            let (y, batch) = session.graph.batch_norm(x, g, b, NORM_EPS)?;
            session.stats_updates.push(StatsUpdate { running_mean: self.running_mean, running_var: self.running_var, batch });
            Ok(y)
        } else {
            let store = session.store();
            let stats = BatchStats {
                mean: store.get(self.running_mean).data().to_vec(),
                var: store.get(self.running_var).data().to_vec(),
            };
            session.graph.batch_norm_fixed(x, g, b, &stats, NORM_EPS)
        }
    }
}

/// Folds recorded batch statistics into the running buffers:
/// `running = (1 - m)·running + m·batch`.
pub fn apply_stats_updates<T: Real>(store: &mut ParamStore<T>, updates: &[StatsUpdate<T>], momentum: f64) {
    let m = T::lit(momentum);
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch.mean), (u.running_var, &u.batch.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inference_batch_norm_with_unit_stats_is_affine() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        store.get_mut(bn.gain).data_mut().copy_from_slice(&[2.0, 1.0]);
        store.get_mut(bn.bias).data_mut().copy_from_slice(&[0.0, -1.0]);
        let mut s = Session::new(&store, false);
        let x = s.graph.leaf(Tensor::from_rows(&[&[1.0, 3.0], &[-2.0, 0.5]]).unwrap());
        let y = bn.forward(&mut s, x).unwrap();
        let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
        let want = [2.0 * scale, 3.0 * scale - 1.0, -4.0 * scale, 0.5 * scale - 1.0];
        for (a, b) in s.graph.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_records_and_applies_statistics() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let updates = {
            let mut s = Session::new(&store, true);
            let x = s.graph.leaf(Tensor::from_rows(&[&[1.0], &[3.0]]).unwrap());
            bn.forward(&mut s, x).unwrap();
            s.stats_updates
        };
        apply_stats_updates(&mut store, &updates, 0.5);
        assert_eq!(store.get(bn.running_mean).data(), &[1.0]);
        assert_eq!(store.get(bn.running_var).data(), &[1.0]);
    }
}
