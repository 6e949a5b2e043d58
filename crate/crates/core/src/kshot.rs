//! Fusion of K support branches weighted by their appearance similarity to
//! the query.

use crate::autograd::{Graph, Var};
use crate::csrm::final_logits;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax over branches of the mean entry of each position affinity.
pub fn appearance_factors<T: Scalar>(affinities: &[Tensor<T>]) -> Result<Vec<T>> {
    let means: Vec<T> = affinities
        .iter()
        .map(|l| l.sum() / T::of(l.len().max(1) as f64))
        .collect();
    factors_from_means(&means)
}

/// Softmax of per-branch affinity means.
pub fn factors_from_means<T: Scalar>(means: &[T]) -> Result<Vec<T>> {
    if means.is_empty() {
        return Err(Error::Shape("appearance factors need at least one branch".into()));
    }
    if means.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numerical("non-finite affinity mean".into()));
    }
    let mx = means.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = means.iter().map(|&m| (m - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `sum_j phi_j * items_j` for same-shaped graph values.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, items: &[Var], phi: &[T]) -> Result<Var> {
    if items.is_empty() || items.len() != phi.len() {
        return Err(Error::Shape(format!("{} branches with {} weights", items.len(), phi.len())));
    }
    let mut acc = g.scale(items[0], phi[0]);
    for (&v, &w) in items.iter().zip(phi).skip(1) {
        let t = g.scale(v, w);
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Final logits from the phi-weighted foreground and background prototypes.
pub fn fused_logits<T: Scalar>(
    g: &mut Graph<T>,
    f_q: Var,
    fg: &[Var],
    bg: &[Var],
    phi: &[T],
    tau: f64,
) -> Result<Var> {
    let pf = weighted_sum(g, fg, phi)?;
    let pb = weighted_sum(g, bg, phi)?;
    final_logits(g, f_q, pf, pb, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_examples() {
        let one = appearance_factors(&[Tensor::<f64>::full(&[2, 2], 3.0)]).unwrap();
        assert_eq!(one, vec![1.0]);
        let two = factors_from_means(&[1.0f64, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((two[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((two[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let same = factors_from_means(&[0.3f64, 0.3]).unwrap();
        assert_eq!(same, vec![0.5, 0.5]);
    }

    #[test]
    fn one_hot_weights_select_a_branch() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.7).sin()));
        let a = g.constant(Tensor::new(&[3], vec![1.0, 0.2, -0.3]).unwrap());
        let b = g.constant(Tensor::new(&[3], vec![-0.5, 0.4, 0.9]).unwrap());
        let c = g.constant(Tensor::new(&[3], vec![0.1, 0.1, 0.1]).unwrap());
        let fused = fused_logits(&mut g, f, &[a, c], &[b, c], &[1.0, 0.0], 10.0).unwrap();
        let single = final_logits(&mut g, f, a, b, 10.0).unwrap();
        assert_eq!(g.value(fused), g.value(single));
    }
}
