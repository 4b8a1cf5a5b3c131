//! Finite-difference gradient oracle.
//!
//! Independent of the tape in [`crate::graph`]: it only needs a closure from
//! a flat parameter slice to a scalar. Central differences with step `h`
//! approximate each partial derivative to O(h²), which at `h = 1e-5` leaves
//! roughly ten decimal digits of agreement for well-scaled smooth functions —
//! comfortably inside the acceptance band of relative error 1e-4 with an
//! absolute floor of 1e-8.

use crate::error::Result;

/// Central-difference gradient of `f` at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Error of one analytic/numeric pair, relative above `floor`, absolute
/// below it: `|a − n| / max(floor, max(|a|, |n|))`.
pub fn grad_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = floor.max(analytic.abs().max(numeric.abs()));
    (analytic - numeric).abs() / denom
}

/// Worst [`grad_error`] across a gradient vector. Panics on length mismatch.
pub fn max_grad_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient length mismatch: {} vs {}",
        analytic.len(),
        numeric.len()
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| grad_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

/// True when every coordinate satisfies
/// `|a − n| ≤ max(floor, rel · max(|a|, |n|))`.
pub fn grads_close(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64) -> bool {
    analytic.len() == numeric.len()
        && analytic
            .iter()
            .zip(numeric)
            .all(|(a, n)| (a - n).abs() <= floor.max(rel * a.abs().max(n.abs())))
}

/// Assert [`grads_close`], reporting the worst coordinate on failure.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = (0usize, 0.0f64);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = grad_error(*a, *n, floor);
        if err > worst.1 {
            worst = (i, err);
        }
    }
    assert!(
        grads_close(analytic, numeric, rel, floor),
        "gradients disagree at index {}: analytic {} vs numeric {} (scaled error {:.3e}, allowed rel {:.1e} / floor {:.1e})",
        worst.0,
        analytic[worst.0],
        numeric[worst.0],
        worst.1,
        rel,
        floor
    );
}
