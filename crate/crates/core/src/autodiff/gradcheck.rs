//! Central finite differences, used to check analytic gradients.
//!
//! Only forward evaluations are involved, so the check is independent of the
//! backward rules it validates.

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]. Central differences at h = 1e-5
/// carry roughly 1e-10 of absolute round-off, so entries smaller than this
/// are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Numerical gradient of `f` at `x`, one coordinate at a time.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
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

/// Largest [`relative_error`] between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Whole-tensor relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, RELATIVE_FLOOR)`.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(RELATIVE_FLOOR)
}
