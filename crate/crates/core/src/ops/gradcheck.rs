//! Central finite-difference gradient checking in 64-bit arithmetic.

use crate::error::{Error, Result};

/// Step size and error normalization for a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is ~0 are judged by absolute error below this scale.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`
/// for every coordinate of `point` and returns the worst relative error.
pub fn finite_difference_check<F>(mut f: F, point: &[f64], analytic: &[f64], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "gradient check: {} coordinates but {} analytic entries",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + cfg.eps;
        let up = f(&x);
        x[i] = orig - cfg.eps;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic {}, numeric {numeric}",
                analytic[i]
            )));
        }
        let err = relative_error(analytic[i], numeric, cfg.floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let point = [1.0, -2.0, 0.5];
        let grad: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let r = finite_difference_check(f, &point, &grad, &GradCheck::default()).unwrap();
        assert!(r.max_rel_error < 1e-8);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[f64]| x[0] * x[1];
        let r = finite_difference_check(f, &[2.0, 3.0], &[3.0, 2.5], &GradCheck::default()).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn non_finite_is_numeric_failure() {
        let f = |x: &[f64]| if x[0] > 1.0 { f64::NAN } else { x[0] };
        let err = finite_difference_check(f, &[1.0], &[1.0], &GradCheck::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
