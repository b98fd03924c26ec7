//! Trainable rows of the orthogonal circuit matrix and the analytic task
//! objectives.
//!
//! Only the measured rows `w` (and the fixed CCA reference `u`) are stored;
//! the remaining rows never influence the measured statistics.

use crate::channel::{Covariance, DisplacementVector};
use crate::error::{Error, Result};
use crate::Vector;

pub const UNIT_TOL: f64 = 1e-12;
pub const ORTHO_TOL: f64 = 1e-10;
/// Norm below which a projected direction is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitConfig {
    w: Vector,
    u: Option<Vector>,
}

impl CircuitConfig {
    /// Wraps already-orthonormal rows, checking the invariants.
    pub fn new(w: Vector, u: Option<Vector>) -> Result<Self> {
        check_unit(&w)?;
        if let Some(u) = &u {
            check_unit(u)?;
            if u.len() != w.len() {
                return Err(Error::DimensionMismatch {
                    expected: w.len(),
                    actual: u.len(),
                });
            }
            let dot = w.dot(u);
            if dot.abs() >= ORTHO_TOL {
                return Err(Error::InvalidConfig(format!(
                    "w and u are not orthogonal (w·u = {dot:e})"
                )));
            }
        }
        Ok(Self { w, u })
    }

    pub fn w(&self) -> &Vector {
        &self.w
    }

    pub fn u(&self) -> Option<&Vector> {
        self.u.as_ref()
    }

    pub fn mode_count(&self) -> usize {
        self.w.len()
    }
}

fn check_unit(v: &Vector) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_TOL || !norm.is_finite() {
        return Err(Error::NotUnitNorm(norm));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectiveDisplacement {
    pub lambda_w: f64,
    pub lambda_u: Option<f64>,
}

/// `λ_w = w·λ` and, when the circuit carries `u`, `λ_u = u·λ`.
pub fn project_modes(
    circuit: &CircuitConfig,
    disp: &DisplacementVector,
) -> Result<CollectiveDisplacement> {
    if disp.lambda.len() != circuit.mode_count() {
        return Err(Error::DimensionMismatch {
            expected: circuit.mode_count(),
            actual: disp.lambda.len(),
        });
    }
    Ok(CollectiveDisplacement {
        lambda_w: circuit.w.dot(&disp.lambda),
        lambda_u: circuit.u.as_ref().map(|u| u.dot(&disp.lambda)),
    })
}

/// Normalizes `raw_w`, first removing its component along `u` if given.
///
/// Returns [`Error::Degenerate`] when the remaining norm is below
/// [`DEGENERATE_NORM`]; callers are expected to resample.
pub fn orthonormalize(raw_w: &Vector, u: Option<&Vector>) -> Result<CircuitConfig> {
    let mut w = raw_w.clone();
    if let Some(u) = u {
        if u.len() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                actual: u.len(),
            });
        }
        w.axpy(-u.dot(&w), u, 1.0);
        // second pass pins w·u at rounding level for nearly parallel inputs
        w.axpy(-u.dot(&w), u, 1.0);
    }
    let norm = w.norm();
    if !norm.is_finite() || norm < DEGENERATE_NORM {
        return Err(Error::Degenerate(norm));
    }
    w /= norm;
    Ok(CircuitConfig { w, u: u.cloned() })
}

/// `w·V·w`, the variance of the collective displacement `λ_w`.
pub fn pca_objective(w: &Vector, cov: &Covariance) -> Result<f64> {
    cov.check_dim(w.len())?;
    Ok(w.dot(&(cov.matrix() * w)).max(0.0))
}

/// `u·V·w`, the cross-correlation `E[λ_w λ_u]`.
pub fn cca_objective(w: &Vector, u: &Vector, cov: &Covariance) -> Result<f64> {
    cov.check_dim(w.len())?;
    cov.check_dim(u.len())?;
    Ok(u.dot(&(cov.matrix() * w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_rank1_covariance, uniform_direction, SignalParams};
    use crate::Matrix;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn e(m: usize, i: usize) -> Vector {
        let mut x = Vector::zeros(m);
        x[i] = 1.0;
        x
    }

    #[test]
    fn projection_examples() {
        let c = CircuitConfig::new(e(2, 0), None).unwrap();
        let d = DisplacementVector {
            lambda: v(&[0.3, -0.1]),
        };
        assert_eq!(project_modes(&c, &d).unwrap().lambda_w, 0.3);
        assert_eq!(project_modes(&c, &d).unwrap().lambda_u, None);

        let uni = uniform_direction(7);
        let d = DisplacementVector {
            lambda: &uni * 0.42,
        };
        let c = CircuitConfig::new(uni.clone(), None).unwrap();
        assert!((project_modes(&c, &d).unwrap().lambda_w - 0.42).abs() < 1e-15);

        let perp = orthonormalize(&e(7, 0), Some(&uni)).unwrap();
        let c = CircuitConfig::new(perp.w().clone(), None).unwrap();
        assert!(project_modes(&c, &d).unwrap().lambda_w.abs() < 1e-15);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let c = CircuitConfig::new(e(3, 0), None).unwrap();
        let d = DisplacementVector {
            lambda: v(&[1.0, 2.0]),
        };
        assert!(matches!(
            project_modes(&c, &d),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn orthonormalize_examples() {
        let c = orthonormalize(&v(&[2.0, 0.0, 0.0]), None).unwrap();
        assert_eq!(c.w(), &v(&[1.0, 0.0, 0.0]));

        let u = v(&[1.0, 0.0, 0.0]);
        let c = orthonormalize(&v(&[1.0, 1.0, 0.0]), Some(&u)).unwrap();
        assert_eq!(c.w(), &v(&[0.0, 1.0, 0.0]));
        assert_eq!(c.u(), Some(&u));

        assert!(matches!(
            orthonormalize(&u, Some(&u)),
            Err(Error::Degenerate(_))
        ));
        assert!(orthonormalize(&Vector::zeros(3), None).is_err());
    }

    #[test]
    fn circuit_invariants_enforced() {
        assert!(CircuitConfig::new(v(&[1.0, 1.0]), None).is_err());
        assert!(CircuitConfig::new(e(2, 0), Some(e(2, 0))).is_err());
        assert!(CircuitConfig::new(e(2, 0), Some(e(2, 1))).is_ok());
    }

    #[test]
    fn pca_objective_examples() {
        let cov = make_rank1_covariance(SignalParams::new(21, 0.02).unwrap()).unwrap();
        let uni = uniform_direction(21);
        assert!((pca_objective(&uni, &cov).unwrap() - 8.4e-3).abs() < 1e-15);
        let perp = orthonormalize(&e(21, 3), Some(&uni)).unwrap();
        assert!(pca_objective(perp.w(), &cov).unwrap() < 1e-18);

        let id = Covariance::new(Matrix::identity(4, 4)).unwrap();
        let w = orthonormalize(&v(&[1.0, -2.0, 0.5, 3.0]), None).unwrap();
        assert!((pca_objective(w.w(), &id).unwrap() - 1.0).abs() < 1e-14);
        assert!(pca_objective(&e(3, 0), &id).is_err());
    }

    #[test]
    fn cca_objective_rank1_closed_form() {
        // u·v = c, w = normalize(v − c u)  ⇒  uᵀVw = Mσ_c² · c·√(1−c²)
        let m = 6;
        let sigma_c: f64 = 0.3;
        let cov = make_rank1_covariance(SignalParams::new(m, sigma_c).unwrap()).unwrap();
        let uni = uniform_direction(m);
        let other = orthonormalize(&e(m, 0), Some(&uni)).unwrap();
        let angle = 0.7_f64;
        let u = &uni * angle.cos() + other.w() * angle.sin();
        let c = u.dot(&uni);
        let w = orthonormalize(&(&uni - &u * c), None).unwrap();
        let expected = m as f64 * sigma_c.powi(2) * c * (1.0 - c * c).sqrt();
        let got = cca_objective(w.w(), &u, &cov).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        assert!((cca_objective(&(-w.w()), &u, &cov).unwrap() + expected).abs() < 1e-14);

        let zero = Covariance::new(Matrix::zeros(m, m)).unwrap();
        assert_eq!(cca_objective(w.w(), &u, &zero).unwrap(), 0.0);

        let a = orthonormalize(&e(m, 0), Some(&uni)).unwrap();
        let b = orthonormalize(&e(m, 1), Some(&uni)).unwrap();
        assert!(cca_objective(a.w(), b.w(), &cov).unwrap().abs() < 1e-16);
    }

    fn unit_vec(m: usize) -> impl Strategy<Value = Vector> {
        prop::collection::vec(-1.0f64..1.0, m)
            .prop_filter("nonzero", |x| x.iter().map(|a| a * a).sum::<f64>() > 1e-3)
            .prop_map(|x| {
                let v = Vector::from_vec(x);
                let n = v.norm();
                v / n
            })
    }

    proptest! {
        #[test]
        fn orthonormalize_idempotent(raw in prop::collection::vec(-5.0f64..5.0, 5), u in unit_vec(5)) {
            let raw = Vector::from_vec(raw);
            if let Ok(first) = orthonormalize(&raw, Some(&u)) {
                prop_assert!(first.w().dot(&u).abs() < ORTHO_TOL);
                let second = orthonormalize(first.w(), Some(&u)).unwrap();
                prop_assert!((second.w() - first.w()).amax() < 1e-12);
            }
            if let Ok(first) = orthonormalize(&raw, None) {
                let second = orthonormalize(first.w(), None).unwrap();
                prop_assert!((second.w() - first.w()).amax() < 1e-12);
            }
        }

        #[test]
        fn rayleigh_bound(factor in prop::collection::vec(-1.0f64..1.0, 12), w in unit_vec(4)) {
            let f = Matrix::from_vec(4, 3, factor);
            let cov = Covariance::from_factor(f).unwrap();
            let top = nalgebra::SymmetricEigen::new(cov.matrix().clone()).eigenvalues.max();
            let q = pca_objective(&w, &cov).unwrap();
            prop_assert!(q >= 0.0);
            prop_assert!(q <= top * (1.0 + 1e-12) + 1e-15);
            prop_assert!((pca_objective(&(-&w), &cov).unwrap() - q).abs() < 1e-15);
        }
    }
}
