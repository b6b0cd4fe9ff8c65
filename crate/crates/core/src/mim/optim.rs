use std::collections::HashMap;

use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// Adam with decoupled weight decay. Decay applies to matrices and
/// kernels only, not to biases, norm gains or the mask token.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, betas: (0.9, 0.95), eps: 1e-8, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let decay = if store.get(*id).rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            if m.len() != g.len() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            for (((p, gi), mi), vi) in store.get_mut(*id).data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                let pv = p.as_f64();
                *p = T::lit(pv - self.lr * (update + decay * pv));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &[(id, Tensor::new([2], vec![3.0, -0.5]).unwrap())]);
        let d = store.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::full([1, 1], 1.0));
        let b = store.insert("b", Tensor::full([1], 1.0));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &[(w, Tensor::zeros([1, 1])), (b, Tensor::zeros([1]))]);
        assert!((store.get(w).data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(store.get(b).data()[0], 1.0);
    }
}
