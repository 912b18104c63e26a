//! Central finite-difference verification of analytic gradients (64-bit mode).

use super::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±ε perturbation crossed a non-differentiable point.
    pub skipped: usize,
}

/// Components smaller than this are compared on an absolute scale: with ε = 1e-3
/// the O(ε²) truncation error of a central difference is around 1e-7, which would
/// dominate the ratio for tiny gradients.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against central differences of `loss` over every scalar in
/// `params`. `loss` returns the loss value and a kink signature; a coordinate is
/// skipped when the signatures at `θ+ε` and `θ-ε` differ.
pub fn check<F>(params: &mut ParamSet<f64>, analytic: &ParamSet<f64>, eps: f64, mut loss: F) -> GradCheckReport
where
    F: FnMut(&ParamSet<f64>) -> (f64, Vec<bool>),
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..params.scalar_count() {
        let orig = params.flat(i);
        params.set_flat(i, orig + eps);
        let (plus, sig_plus) = loss(params);
        params.set_flat(i, orig - eps);
        let (minus, sig_minus) = loss(params);
        params.set_flat(i, orig);
        if sig_plus != sig_minus {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic.flat(i), numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

/// Finite-difference gradient of a scalar function of a plain vector.
pub fn numeric_gradient<F>(x: &[f64], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let plus = f(&work);
            work[i] = x[i] - eps;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}
