//! Ground-truth optima used for accuracy scoring.
//!
//! Returned vectors follow a fixed sign convention: the first component whose
//! magnitude exceeds [`SIGN_EPS`] is positive.

use nalgebra::SymmetricEigen;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::channel::Covariance;
use crate::error::{Error, Result};
use crate::{Rng, Vector};

/// Eigenvalues within this relative gap of the top one span the optimal space.
pub const DEGENERACY_TOL: f64 = 1e-9;
pub const SIGN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub w_star: Vector,
    pub objective_value: f64,
    /// Orthonormal basis of the optimal set. One vector unless the top
    /// eigenvalue is degenerate.
    pub optimal_space: Vec<Vector>,
}

impl OracleResult {
    pub fn is_degenerate(&self) -> bool {
        self.optimal_space.len() > 1
    }

    /// Squared norm of the projection of `w` onto the optimal space; equals
    /// `(w·w*)²` in the nondegenerate case.
    pub fn overlap(&self, w: &Vector) -> f64 {
        self.optimal_space
            .iter()
            .map(|b| b.dot(w).powi(2))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }
}

pub(crate) fn canonical_sign(mut v: Vector) -> Vector {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > SIGN_EPS) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

/// Top eigenpair of `V`.
///
/// A degenerate top eigenspace (relative gap below [`DEGENERACY_TOL`]) is
/// reported through [`OracleResult::optimal_space`]; `w_star` is then one
/// member of that space. The zero matrix is fully degenerate.
pub fn principal_eigvec(cov: &Covariance) -> OracleResult {
    let eig = SymmetricEigen::new(cov.matrix().clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let optimal_space: Vec<Vector> = order
        .iter()
        .take_while(|&&i| top - eig.eigenvalues[i] <= DEGENERACY_TOL * scale)
        .map(|&i| canonical_sign(eig.eigenvectors.column(i).into_owned()))
        .collect();
    let w_star = optimal_space[0].clone();
    // Rayleigh quotient of the returned vector, so it is consistent with w_star
    let objective_value = w_star.dot(&(cov.matrix() * &w_star)).max(0.0);
    OracleResult {
        w_star,
        objective_value,
        optimal_space,
    }
}

/// Unit `w ⊥ u` maximizing `|u·V·w|`: `w* = normalize((I − uuᵀ)·V·u)`.
pub fn cca_optimum(cov: &Covariance, u: &Vector) -> Result<OracleResult> {
    cov.check_dim(u.len())?;
    let norm = u.norm();
    if (norm - 1.0).abs() > crate::circuit::UNIT_TOL {
        return Err(Error::NotUnitNorm(norm));
    }
    // symmetrize so the result depends only on the symmetric part of V
    let sym = (cov.matrix() + cov.matrix().transpose()) * 0.5;
    let vu = &sym * u;
    let residual = &vu - u * u.dot(&vu);
    let r = residual.norm();
    let scale = vu.norm().max(sym.amax());
    if r <= 1e-12 * scale.max(f64::MIN_POSITIVE) || r == 0.0 {
        return Err(Error::DegenerateCca);
    }
    let w_star = canonical_sign(residual / r);
    let objective_value = u.dot(&(&sym * &w_star)).abs();
    Ok(OracleResult {
        optimal_space: vec![w_star.clone()],
        w_star,
        objective_value,
    })
}

/// Uniformly distributed unit vector (normalized Gaussian).
pub fn haar_unit_vector(m: usize, rng: &mut Rng) -> Vector {
    loop {
        let v = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Mean of `(w·e₁)²` over Haar-random unit `w`; converges to `1/M`.
///
/// The target is fixed to `e₁` without loss of generality, since the Haar
/// measure is rotation invariant.
pub fn random_guess_baseline(m: usize, samples: usize, rng: &mut Rng) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidParams(format!("M must be >= 2, got {m}")));
    }
    if samples == 0 {
        return Err(Error::InvalidParams("samples must be >= 1".into()));
    }
    let total: f64 = (0..samples)
        .map(|_| haar_unit_vector(m, rng)[0].powi(2))
        .sum();
    Ok(total / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_rank1_covariance, uniform_direction, SignalParams};
    use crate::circuit::orthonormalize;
    use crate::Matrix;
    use rand::SeedableRng;

    fn random_psd(m: usize, rng: &mut Rng) -> Covariance {
        let f = Matrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        Covariance::from_factor(f).unwrap()
    }

    #[test]
    fn rank1_principal() {
        for (m, s) in [(2, 0.5), (21, 0.02), (7, 1.3)] {
            let cov = make_rank1_covariance(SignalParams::new(m, s).unwrap()).unwrap();
            let o = principal_eigvec(&cov);
            assert!(!o.is_degenerate());
            assert!((o.w_star.dot(&uniform_direction(m)) - 1.0).abs() < 1e-12);
            let expected = m as f64 * s * s;
            assert!((o.objective_value - expected).abs() < 1e-12 * expected.max(1.0));
            let resid = cov.matrix() * &o.w_star - &o.w_star * o.objective_value;
            assert!(resid.amax() < 1e-9);
        }
    }

    #[test]
    fn diagonal_principal() {
        let cov = Covariance::new(Matrix::from_diagonal(&Vector::from_vec(vec![
            3.0, 1.0, 2.0,
        ])))
        .unwrap();
        let o = principal_eigvec(&cov);
        assert_eq!(o.w_star, Vector::from_vec(vec![1.0, 0.0, 0.0]));
        assert!((o.objective_value - 3.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_top_space_is_flagged() {
        let cov = Covariance::new(Matrix::from_diagonal(&Vector::from_vec(vec![
            2.0, 2.0, 1.0,
        ])))
        .unwrap();
        let o = principal_eigvec(&cov);
        assert!(o.is_degenerate());
        assert_eq!(o.optimal_space.len(), 2);
        let w = orthonormalize(&Vector::from_vec(vec![1.0, 1.0, 0.0]), None).unwrap();
        assert!((o.overlap(w.w()) - 1.0).abs() < 1e-12);
        assert!(o.overlap(&Vector::from_vec(vec![0.0, 0.0, 1.0])) < 1e-12);
    }

    #[test]
    fn principal_beats_random_probes() {
        let mut rng = Rng::seed_from_u64(42);
        let cov = random_psd(5, &mut rng);
        let o = principal_eigvec(&cov);
        for _ in 0..10_000 {
            let w = haar_unit_vector(5, &mut rng);
            assert!(w.dot(&(cov.matrix() * &w)) <= o.objective_value * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cca_rank1_closed_form() {
        let m = 9;
        let sigma_c: f64 = 0.1;
        let cov = make_rank1_covariance(SignalParams::new(m, sigma_c).unwrap()).unwrap();
        let v = uniform_direction(m);
        let mut e = Vector::zeros(m);
        e[2] = 1.0;
        let perp = orthonormalize(&e, Some(&v)).unwrap();
        let theta = 1.1_f64;
        let u = &v * theta.cos() + perp.w() * theta.sin();
        let c = u.dot(&v);
        let o = cca_optimum(&cov, &u).unwrap();
        let expected_dir = orthonormalize(&(&v - &u * c), None).unwrap();
        assert!((o.w_star.dot(expected_dir.w()).abs() - 1.0).abs() < 1e-12);
        let expected = m as f64 * sigma_c * sigma_c * c * (1.0 - c * c).sqrt();
        assert!((o.objective_value - expected).abs() < 1e-14);
        assert!(o.w_star.dot(&u).abs() < 1e-12);
    }

    #[test]
    fn cca_eigenvector_reference_is_degenerate() {
        let cov = make_rank1_covariance(SignalParams::new(4, 0.3).unwrap()).unwrap();
        assert!(matches!(
            cca_optimum(&cov, &uniform_direction(4)),
            Err(Error::DegenerateCca)
        ));
        let cov =
            Covariance::new(Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0]))).unwrap();
        assert!(cca_optimum(&cov, &Vector::from_vec(vec![0.0, 1.0])).is_err());
        assert!(cca_optimum(&cov, &Vector::from_vec(vec![0.0, 2.0])).is_err());
    }

    #[test]
    fn oracles_permutation_invariant() {
        let mut rng = Rng::seed_from_u64(8);
        let m = 5;
        let cov = random_psd(m, &mut rng);
        let u = haar_unit_vector(m, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let pm = Matrix::from_fn(m, m, |i, j| cov.matrix()[(perm[i], perm[j])]);
        let pcov = Covariance::new(pm).unwrap();
        let pu = Vector::from_fn(m, |i, _| u[perm[i]]);

        let a = principal_eigvec(&cov);
        let b = principal_eigvec(&pcov);
        let b_back = {
            let mut x = Vector::zeros(m);
            for i in 0..m {
                x[perm[i]] = b.w_star[i];
            }
            x
        };
        assert!((a.w_star.dot(&b_back).abs() - 1.0).abs() < 1e-10);

        let a = cca_optimum(&cov, &u).unwrap();
        let b = cca_optimum(&pcov, &pu).unwrap();
        assert!((a.objective_value - b.objective_value).abs() < 1e-12);
        let dot: f64 = (0..m).map(|i| b.w_star[i] * a.w_star[perm[i]]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn baseline_small_cases() {
        let mut rng = Rng::seed_from_u64(1);
        let one = random_guess_baseline(3, 1, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&one));
        let again = random_guess_baseline(3, 1, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(one, again);
        assert!(random_guess_baseline(1, 10, &mut rng).is_err());
    }

    #[test]
    fn sign_convention() {
        let v = canonical_sign(Vector::from_vec(vec![0.0, -0.6, 0.8]));
        assert_eq!(v, Vector::from_vec(vec![0.0, 0.6, -0.8]));
    }
}
