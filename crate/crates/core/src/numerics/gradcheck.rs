//! Central finite differences for verifying analytic gradients.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Denominator floor used by [`max_relative_error`]. Entries smaller than
/// this in magnitude are effectively compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries that are zero in both vectors (up to rounding)
/// from dominating the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error_with_floor(analytic, numeric, RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
