use crate::error::{invalid, Result};

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences, one coordinate at a time, and reports the largest
/// relative error.
///
/// `f` maps a parameter vector to `(value, gradient)`; only the value is
/// used at the perturbed points.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    finite_diff_check_with(|p| f(p).0, &analytic, params, step)
}

/// As [`finite_diff_check`] with the analytic gradient supplied up front
/// and `value` evaluated only at perturbed points.
pub fn finite_diff_check_with<F>(mut value: F, analytic: &[f64], params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(invalid(format!("step {step} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = value(&p);
        p[i] = orig - step;
        let down = value(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    Ok(worst)
}
