//! Central-difference gradient oracle and comparison helpers.
//!
//! The oracle is deliberately independent of the tape: it only evaluates a
//! scalar function at perturbed parameter values.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Central differences (f(p+eps) - f(p-eps)) / (2 eps), one entry per
/// parameter element. `f` must be a pure function of the parameters.
pub fn finite_diff_grad<R: Real>(
    f: &mut dyn FnMut(&[Tensor<R>]) -> Result<R>,
    params: &[Tensor<R>],
    eps: f64,
) -> Result<Vec<Tensor<R>>> {
    if eps <= 0.0 {
        return Err(Error::contract("finite_diff_grad: eps must be positive"));
    }
    let eps_r = R::from_f64(eps);
    let two_eps = R::from_f64(2.0 * eps);
    let mut work: Vec<Tensor<R>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps_r;
            let plus = f(&work)?;
            work[pi].data_mut()[ei] = orig - eps_r;
            let minus = f(&work)?;
            work[pi].data_mut()[ei] = orig;
            g.data_mut()[ei] = (plus - minus) / two_eps;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Outcome of comparing analytic gradients against the oracle.
#[derive(Debug, Clone, Copy)]
pub struct GradComparison {
    /// Largest relative error among elements that exceed `abs_tol`.
    pub max_rel_err: f64,
    /// Largest absolute error over all elements.
    pub max_abs_err: f64,
    pub elements: usize,
}

impl GradComparison {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Element-wise comparison. An element passes outright when the absolute
/// difference is below `abs_tol` (finite differencing has ~1e-10 noise at
/// 64-bit, so near-zero gradients cannot be judged relatively); otherwise
/// its relative error |a-n| / max(|a|,|n|) enters `max_rel_err`.
pub fn compare_grads<R: Real>(
    analytic: &[Tensor<R>],
    numeric: &[Tensor<R>],
    abs_tol: f64,
) -> Result<GradComparison> {
    if analytic.len() != numeric.len() {
        return Err(Error::contract("compare_grads: parameter count mismatch"));
    }
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut elements = 0;
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::contract("compare_grads: shape mismatch"));
        }
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let av = av.as_f64();
            let nv = nv.as_f64();
            let abs = (av - nv).abs();
            max_abs = max_abs.max(abs);
            elements += 1;
            if abs > abs_tol {
                let rel = abs / av.abs().max(nv.abs());
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(GradComparison {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        elements,
    })
}
