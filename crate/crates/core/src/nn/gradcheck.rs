//! Finite-difference gradient checking.
//!
//! The checker owns the oracle role: any differentiable piece of the stack
//! is validated by perturbing parameters and comparing central differences
//! against the analytic gradient. Run in f64 only — the step size (1e−5)
//! sits well above f64 roundoff and well below curvature scales.

use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// (parameter index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a floor: tiny gradients are compared absolutely at
/// scale 1e−3, which keeps finite-difference roundoff (~1e−11 for O(1)
/// losses at step 1e−5) from masquerading as gradient bugs.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Check `analytic` (one tensor per parameter, matching `params` order)
/// against central finite differences of `loss` over the elements listed in
/// `picks` as (param index, element index) pairs. `loss` must be a pure
/// function of the parameter values.
pub fn grad_check<F>(
    params: &mut [&mut Tensor<f64>],
    analytic: &[Tensor<f64>],
    picks: &[(usize, usize)],
    step: f64,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&[&mut Tensor<f64>]) -> f64,
{
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &(pi, ei) in picks {
        let orig = params[pi].data()[ei];
        params[pi].data_mut()[ei] = orig + step;
        let fp = loss(params);
        params[pi].data_mut()[ei] = orig - step;
        let fm = loss(params);
        params[pi].data_mut()[ei] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[pi].data()[ei];
        let e = rel_err(a, numeric);
        report.n_checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((pi, ei, a, numeric));
        }
    }
    report
}

/// Gradient check through accessor closures, for models whose parameters
/// can't be borrowed mutably while the model runs (get/set/loss typically
/// share a RefCell over the model). Semantics match [`grad_check`].
pub fn grad_check_model<G, S, L>(
    picks: &[(usize, usize)],
    analytic: &[Tensor<f64>],
    step: f64,
    mut get: G,
    mut set: S,
    mut loss: L,
) -> GradCheckReport
where
    G: FnMut(usize, usize) -> f64,
    S: FnMut(usize, usize, f64),
    L: FnMut() -> f64,
{
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &(pi, ei) in picks {
        let orig = get(pi, ei);
        set(pi, ei, orig + step);
        let fp = loss();
        set(pi, ei, orig - step);
        let fm = loss();
        set(pi, ei, orig);
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[pi].data()[ei];
        let e = rel_err(a, numeric);
        report.n_checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((pi, ei, a, numeric));
        }
    }
    report
}

/// Deterministically spread `k` sample indices over a tensor of length `n`.
pub fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}
