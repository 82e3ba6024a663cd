use crate::autodiff::special::ln_gamma_unchecked;
use crate::error::{Error, Result};

/// Tolerance on Σp = 1 and on 0 ≤ p_k ≤ 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// What [`dirichlet_pdf`] does with a point off the simplex.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OffSimplex {
    /// Density is zero off the simplex.
    #[default]
    Zero,
    /// Report a domain error instead.
    Error,
}

/// Dirichlet density 1/B(α) · Π p_k^(α_k − 1) on the unit simplex.
pub fn dirichlet_pdf(p: &[f64], alpha: &[f64], off_simplex: OffSimplex) -> Result<f64> {
    if p.len() != alpha.len() || p.is_empty() {
        return Err(Error::Shape {
            op: "dirichlet_pdf",
            left: vec![p.len()],
            right: vec![alpha.len()],
        });
    }
    if let Some(a) = alpha.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Domain(format!("concentration must be positive, got {a}")));
    }
    let total: f64 = p.iter().sum();
    let in_range = p
        .iter()
        .all(|&v| (-SIMPLEX_TOLERANCE..=1.0 + SIMPLEX_TOLERANCE).contains(&v));
    if !in_range || (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return match off_simplex {
            OffSimplex::Zero => Ok(0.0),
            OffSimplex::Error => Err(Error::Domain(format!(
                "point {p:?} is not on the simplex (sum {total})"
            ))),
        };
    }

    let alpha_sum: f64 = alpha.iter().sum();
    let mut log_density = ln_gamma_unchecked(alpha_sum);
    for (&pk, &ak) in p.iter().zip(alpha) {
        log_density -= ln_gamma_unchecked(ak);
        if ak == 1.0 {
            continue;
        }
        let pk = pk.clamp(0.0, 1.0);
        if pk == 0.0 {
            return Ok(if ak > 1.0 { 0.0 } else { f64::INFINITY });
        }
        log_density += (ak - 1.0) * pk.ln();
    }
    Ok(log_density.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_on_two_simplex() {
        let d = dirichlet_pdf(&[0.3, 0.7], &[1.0, 1.0], OffSimplex::Zero).unwrap();
        assert!((d - 1.0).abs() < 1e-14);
    }

    #[test]
    fn symmetric_two_two_at_midpoint() {
        let d = dirichlet_pdf(&[0.5, 0.5], &[2.0, 2.0], OffSimplex::Zero).unwrap();
        assert!((d - 1.5).abs() < 1e-12);
    }

    #[test]
    fn off_simplex_branch() {
        assert_eq!(dirichlet_pdf(&[0.5, 0.6], &[2.0, 2.0], OffSimplex::Zero).unwrap(), 0.0);
        assert!(dirichlet_pdf(&[0.5, 0.6], &[2.0, 2.0], OffSimplex::Error).is_err());
        assert_eq!(dirichlet_pdf(&[1.2, -0.2], &[2.0, 2.0], OffSimplex::Zero).unwrap(), 0.0);
    }

    #[test]
    fn invalid_concentration() {
        assert!(matches!(
            dirichlet_pdf(&[0.5, 0.5], &[0.0, 1.0], OffSimplex::Zero),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn boundary_points() {
        assert_eq!(dirichlet_pdf(&[0.0, 1.0], &[2.0, 1.0], OffSimplex::Zero).unwrap(), 0.0);
        assert!(dirichlet_pdf(&[0.0, 1.0], &[0.5, 1.0], OffSimplex::Zero)
            .unwrap()
            .is_infinite());
    }
}
