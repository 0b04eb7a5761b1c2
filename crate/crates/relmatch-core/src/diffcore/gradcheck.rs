//! Central finite-difference gradient checking.
//!
//! The numeric side evaluates the function as a plain value map and never
//! touches the analytic gradients it is checking, so it stays a genuinely
//! independent oracle.

use super::array::Array;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max relative error {:.3e} over {} coordinates (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.coordinates,
            self.tolerance
        )
    }
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn numeric_gradient(
    mut f: impl FnMut(&[Array]) -> Result<f64>,
    params: &[Array],
    h: f64,
) -> Result<Vec<Array>> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work: Vec<Array> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Array::zeros(params[pi].shape());
        for ci in 0..params[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = f(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let minus = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            grad.data_mut()[ci] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compare analytic gradients against the central-difference oracle.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` with a
/// floor of 1e-6 so that true-zero gradients do not divide away the noise
/// budget of the difference quotient.
pub fn compare_gradients(
    analytic: &[Array],
    numeric: &[Array],
    tolerance: f64,
) -> GradCheckReport {
    const FLOOR: f64 = 1e-6;
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0usize;
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        debug_assert_eq!(a.shape(), n.shape());
        for ci in 0..a.len() {
            coordinates += 1;
            let (av, nv) = (a.data()[ci], n.data()[ci]);
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((pi, ci));
            }
        }
    }
    GradCheckReport {
        max_rel_err,
        worst,
        tolerance,
        coordinates,
    }
}

/// Full check of a scalar function of parameters: `analytic` comes from the
/// caller (typically a tape backward pass), the numeric side is recomputed
/// here from values alone.
pub fn grad_check(
    f: impl FnMut(&[Array]) -> Result<f64>,
    params: &[Array],
    analytic: &[Array],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let numeric = numeric_gradient(f, params, h)?;
    Ok(compare_gradients(analytic, &numeric, tolerance))
}
