use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-smooth boundary
    /// (bilinear cell edge, leaky-relu hinge) and were left out.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of the scalar `f(x)` against central
/// differences at every coordinate of `x`.
///
/// `f` receives a fresh graph and the leaf holding `x`, and returns the
/// scalar output node.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheck>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, eps, &all)
}

/// Like [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<T, F>(mut f: F, x: &Tensor<T>, eps: f64, coords: &[usize]) -> Result<GradCheck>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite difference step must be positive, got {eps}")));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.len()) {
        return Err(Error::dim(format!("coordinate {bad} outside tensor of length {}", x.len())));
    }
    let mut graph = Graph::new();
    let leaf = graph.leaf(x.clone());
    let out = f(&mut graph, leaf)?;
    let base = graph.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("f(x) is not finite: {base}")));
    }
    let analytic = graph.backward(out)?.wrt(&graph, leaf);
    let signature = graph.regime_signature();
    drop(graph);

    let mut eval = |xp: Tensor<T>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let leaf = g.leaf(xp);
        let out = f(&mut g, leaf)?;
        let v = g.value(out).item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("perturbed f(x) is not finite: {v}")));
        }
        Ok((v, g.regime_signature()))
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst_index: None, checked: 0, skipped: 0 };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + T::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - T::lit(eps);
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sum_is_exact_to_rounding() {
        let x = Tensor::<f64>::from_fn([5], |i| i as f64 * 0.7 - 1.3);
        let r = finite_diff_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let r = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_output_is_an_evaluation_error() {
        let x = Tensor::<f64>::full([2], f64::INFINITY);
        let r = finite_diff_check(|g, x| Ok(g.sum(x)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn hinge_crossings_are_skipped() {
        use crate::tensor::Activation;
        let x = Tensor::<f64>::new([2], vec![1e-7, 0.5]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let y = g.activation(x, Activation::LeakyRelu(0.1));
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
    }
}
