//! Central-difference gradient oracle.

use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;

/// One evaluation of the function under test.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    /// Analytic gradient; only required when requested.
    pub gradient: Option<Vec<f64>>,
    /// Sign pattern of non-smooth op inputs (see `Graph::kink_signature`).
    pub kinks: u64,
}

impl Evaluation {
    pub fn smooth(value: f64, gradient: Option<Vec<f64>>) -> Self {
        Self { value, gradient, kinks: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within 10·eps.
    pub skipped: usize,
}

/// Denominator floor of [`relative_error`]. Central differences at the
/// default step carry round-off near `1e-10` for losses of order one, so
/// gradients much smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a − n| / max(RELATIVE_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences on every coordinate.
///
/// `f(p, want_gradient)` must return the value at `p`, plus the gradient when
/// asked. A coordinate is skipped when the kink signature at `p ± eps` or
/// `p ± 10·eps` differs from the one at `p`.
pub fn finite_difference_check<F>(f: F, params: &[f64], eps: f64) -> Result<CheckReport>
where
    F: FnMut(&[f64], bool) -> Result<Evaluation>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_on(f, params, eps, &all)
}

/// As [`finite_difference_check`], restricted to `coordinates`.
pub fn finite_difference_check_on<F>(mut f: F, params: &[f64], eps: f64, coordinates: &[usize]) -> Result<CheckReport>
where
    F: FnMut(&[f64], bool) -> Result<Evaluation>,
{
    let base = f(params, true)?;
    ensure_finite(base.value)?;
    let analytic = base.gradient.ok_or_else(|| Error::InvalidArgument {
        op: "finite_difference_check",
        reason: "function did not return a gradient".into(),
    })?;
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("gradient has {} entries for {} parameters", analytic.len(), params.len()),
        });
    }

    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut p = params.to_vec();
    for &i in coordinates {
        let original = p[i];
        let mut eval_at = |p: &mut Vec<f64>, delta: f64| -> Result<Evaluation> {
            p[i] = original + delta;
            let e = f(p, false)?;
            ensure_finite(e.value)?;
            Ok(e)
        };
        let plus = eval_at(&mut p, eps)?;
        let minus = eval_at(&mut p, -eps)?;
        let far_plus = eval_at(&mut p, 10.0 * eps)?;
        let far_minus = eval_at(&mut p, -10.0 * eps)?;
        p[i] = original;

        if [&plus, &minus, &far_plus, &far_minus].iter().any(|e| e.kinks != base.kinks) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    Ok(report)
}

fn ensure_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("function value {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_at_two() {
        let report = finite_difference_check(
            |p, _| Ok(Evaluation::smooth(p[0].powi(3), Some(vec![3.0 * p[0] * p[0]]))),
            &[2.0],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let report = finite_difference_check(|_, _| Ok(Evaluation::smooth(4.0, Some(vec![0.0, 0.0]))), &[1.0, -3.0], DEFAULT_EPS).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let report = finite_difference_check(|p, _| Ok(Evaluation::smooth(p[0] * p[0], Some(vec![3.0 * p[0]]))), &[1.0], DEFAULT_EPS).unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let err = finite_difference_check(|_, _| Ok(Evaluation::smooth(f64::NAN, Some(vec![0.0]))), &[0.0], DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
