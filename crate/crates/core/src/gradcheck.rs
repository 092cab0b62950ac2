//! Finite-difference helpers for checking analytic gradients.

use crate::netcore::ModelParams;

/// Fourth-order central difference from `f(x + j h)` for `j = -2, -1, 1, 2`.
fn stencil(step: f64, mut at: impl FnMut(f64) -> f64) -> f64 {
    let (m2, m1, p1, p2) = (at(-2.0 * step), at(-step), at(step), at(2.0 * step));
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step)
}

/// Central differences (fourth order) of `loss` with respect to every parameter.
pub fn central_differences(
    params: &ModelParams,
    step: f64,
    loss: impl Fn(&ModelParams) -> f64,
) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|k| {
            let orig = params.values()[k];
            let d = stencil(step, |h| {
                probe.values_mut()[k] = orig + h;
                loss(&probe)
            });
            probe.values_mut()[k] = orig;
            d
        })
        .collect()
}

/// Central differences (fourth order) of a function of a plain vector.
pub fn central_differences_vec(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let d = stencil(step, |h| {
                probe[k] = x[k] + h;
                f(&probe)
            });
            probe[k] = x[k];
            d
        })
        .collect()
}

/// Largest componentwise relative error.
///
/// Each component is scaled by `max(|a|, |b|, 1e-2 * m)` where `m` is the
/// largest magnitude in either vector, so entries that are tiny compared to
/// the gradient as a whole are compared on the gradient's scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let m = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-2 * m))
        .fold(0.0, f64::max)
}
