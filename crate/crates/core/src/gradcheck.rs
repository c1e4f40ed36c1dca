//! Central finite-difference gradient checking over policy parameters.

use crate::policy::{PolicyGradient, PolicyParams};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Magnitudes below this are compared absolutely; the central difference
/// cannot resolve relative error finer than roundoff / epsilon.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// |a - n| / max(|a|, |n|, floor)
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// (f(θ + ε e_i) − f(θ − ε e_i)) / 2ε for one flat index.
pub fn central_difference<F>(params: &PolicyParams, index: usize, eps: f64, f: &F) -> f64
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut probe = params.clone();
    let x = params.weights.get(index);
    probe.weights.set(index, x + eps);
    let up = f(&probe);
    probe.weights.set(index, x - eps);
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

pub fn numeric_gradient<F>(params: &PolicyParams, eps: f64, f: F) -> Vec<f64>
where
    F: Fn(&PolicyParams) -> f64,
{
    (0..params.num_params())
        .map(|i| central_difference(params, i, eps, &f))
        .collect()
}

/// Compares `analytic` against central differences of `f` at every
/// parameter.
pub fn check<F>(params: &PolicyParams, analytic: &PolicyGradient, eps: f64, f: F) -> GradCheckReport
where
    F: Fn(&PolicyParams) -> f64,
{
    let numeric = numeric_gradient(params, eps, f);
    let mut report = GradCheckReport {
        checked: numeric.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (&n, a)) in numeric.iter().zip(analytic.weights.iter()).enumerate() {
        let err = relative_error(a, n, RELATIVE_FLOOR);
        if i == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}
