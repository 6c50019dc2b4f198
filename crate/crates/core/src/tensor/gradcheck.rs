use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at `coords`.
///
/// The per-coordinate error is
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-8)` and the maximum over the
/// checked coordinates is reported. `f` must be deterministic.
pub fn grad_check<Func>(
    mut f: Func,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<GradCheckReport>
where
    Func: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} params, {} gradient entries", params.len(), analytic.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        work[i] = params[i] + eps;
        let plus = f(&work)?;
        work[i] = params[i] - eps;
        let minus = f(&work)?;
        work[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_relative_error || report.checked == 1 {
            report.max_relative_error = rel;
            report.worst_coord = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function() {
        let a = [0.5, -2.0, 3.0];
        let f = |w: &[f64]| Ok(w.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>());
        let r = grad_check(f, &[1.0, 2.0, 3.0], &a, &[0, 1, 2], 1e-4).unwrap();
        assert!(r.max_relative_error < 1e-8);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn square_at_one() {
        let f = |w: &[f64]| Ok(w[0] * w[0]);
        let r = grad_check(f, &[1.0], &[2.0], &[0], 1e-4).unwrap();
        assert!((r.numeric - 2.0).abs() < 1e-10);
        assert!(r.max_relative_error < 1e-10);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let f = |w: &[f64]| Ok(w[0] * w[0]);
        let r = grad_check(f, &[1.0], &[3.0], &[0], 1e-4).unwrap();
        assert!((r.max_relative_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |w: &[f64]| Ok(1.0 / (w[0] - 1e-4));
        assert!(grad_check(f, &[0.0], &[0.0], &[0], 1e-4).is_err());
    }
}
