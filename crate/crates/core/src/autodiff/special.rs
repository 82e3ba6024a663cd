//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! `ln_gamma` uses the Lanczos approximation (g = 7, nine coefficients) with
//! one downward recurrence step below 0.5. `digamma` and `trigamma` shift the
//! argument above [`ASYMPTOTIC_THRESHOLD`] with the upward recurrences
//! ψ(x) = ψ(x+1) − 1/x and ψ'(x) = ψ'(x+1) + 1/x², then apply the Bernoulli
//! asymptotic series.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;

const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// 0.5 * ln(2π)
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

/// B_{2k} / (2k) for k = 1..7.
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
];

/// B_{2k} for k = 1..7.
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2_730.0,
    7.0 / 6.0,
];

fn check_domain(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires x > 0, got {x}")))
    }
}

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> Result<f64> {
    check_domain("ln_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

/// Digamma ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_domain("digamma", x)?;
    Ok(digamma_unchecked(x))
}

/// Trigamma ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    check_domain("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

/// Returns `(ln Γ(x), ψ(x))`.
pub fn log_gamma_digamma(x: f64) -> Result<(f64, f64)> {
    check_domain("log_gamma_digamma", x)?;
    Ok((ln_gamma_unchecked(x), digamma_unchecked(x)))
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        return ln_gamma_unchecked(x + 1.0) - x.ln();
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_TWO_PI + (z + 0.5) * t.ln() - t + acc.ln()
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut result = 0.0;
    let mut z = x;
    while z < ASYMPTOTIC_THRESHOLD {
        result -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut power = inv2;
    for c in DIGAMMA_SERIES {
        series += c * power;
        power *= inv2;
    }
    result + z.ln() - 0.5 / z - series
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut result = 0.0;
    let mut z = x;
    while z < ASYMPTOTIC_THRESHOLD {
        result += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv * inv2;
    for b in TRIGAMMA_SERIES {
        series += b * power;
        power *= inv2;
    }
    result + inv + 0.5 * inv2 + series
}
