//! Central finite-difference gradient verification.
//!
//! The checker only ever evaluates the forward function, so it stays
//! independent of the tape's backward path and can serve as the oracle for
//! it. Relative error uses a floored denominator: coordinates whose
//! analytic and numeric gradients are both below the floor compare as zero
//! instead of amplifying round-off.

const DENOM_FLOOR: f64 = 1e-4;

/// Central difference df/dx_i at a single coordinate.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += eps;
    let fp = f(&xp);
    xp[i] = x[i] - eps;
    let fm = f(&xp);
    (fp - fm) / (2.0 * eps)
}

/// Full numeric gradient by central differences.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff(f, x, i, eps)).collect()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Max relative error between an analytic gradient and central differences
/// over every coordinate of `x`.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let n = central_diff(f, x, i, eps);
        worst = worst.max(rel_error(analytic[i], n));
    }
    worst
}

/// Same check restricted to a subset of coordinates; used where the full
/// parameter vector is too large to probe exhaustively.
pub fn grad_check_sampled(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for &i in indices {
        let n = central_diff(f, x, i, eps);
        worst = worst.max(rel_error(analytic[i], n));
    }
    worst
}
