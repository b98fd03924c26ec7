//! Stochastic displacement channel.
//!
//! The channel shifts the momentum quadrature of each of `M` modes by a
//! zero-mean Gaussian vector `λ` with `E[λ_i λ_j] = V_ij`. Variances are in
//! units where the vacuum quadrature variance is 1/2.

use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Rng, Vector};

/// Relative symmetry tolerance accepted by [`validate_covariance`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest eigenvalue may be as low as `-PSD_TOL * largest`.
pub const PSD_TOL: f64 = 1e-10;

/// Mode count and per-mode fluctuation amplitude of the maximally correlated
/// (rank-1) signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub mode_count: usize,
    pub sigma_c: f64,
}

impl SignalParams {
    pub fn new(mode_count: usize, sigma_c: f64) -> Result<Self> {
        let params = Self {
            mode_count,
            sigma_c,
        };
        params.check()?;
        Ok(params)
    }

    pub fn check(&self) -> Result<()> {
        if self.mode_count < 2 {
            return Err(Error::InvalidParams(format!(
                "mode_count must be >= 2, got {}",
                self.mode_count
            )));
        }
        if !self.sigma_c.is_finite() || self.sigma_c < 0.0 {
            return Err(Error::InvalidParams(format!(
                "sigma_c must be finite and >= 0, got {}",
                self.sigma_c
            )));
        }
        Ok(())
    }

    /// Top eigenvalue `M σ_c²` of the rank-1 covariance.
    pub fn total_variance(&self) -> f64 {
        self.mode_count as f64 * self.sigma_c * self.sigma_c
    }
}

/// Uniform unit vector `(1, …, 1)/√M`.
pub fn uniform_direction(mode_count: usize) -> Vector {
    Vector::from_element(mode_count, 1.0 / (mode_count as f64).sqrt())
}

/// Validated symmetric positive-semidefinite signal covariance.
#[derive(Debug, Clone)]
pub struct Covariance {
    matrix: Matrix,
    /// Columns `F` with `F Fᵀ = V`, when known exactly at construction.
    factor: Option<Matrix>,
}

impl Covariance {
    /// Validates `matrix` and wraps it.
    pub fn new(matrix: Matrix) -> Result<Self> {
        let report = validate_covariance(&matrix)?;
        if !report.accepted {
            return Err(Error::InvalidCovariance(report.reason.unwrap_or_default()));
        }
        Ok(Self {
            matrix,
            factor: None,
        })
    }

    /// Builds `V = F Fᵀ` from a known factor; no eigendecomposition needed to
    /// sample it.
    pub fn from_factor(factor: Matrix) -> Result<Self> {
        let matrix = &factor * factor.transpose();
        let mut cov = Self::new(matrix)?;
        cov.factor = Some(factor);
        Ok(cov)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn mode_count(&self) -> usize {
        self.matrix.nrows()
    }

    /// Loads a whitespace-separated matrix file. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(parse_matrix(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub(crate) fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.mode_count() {
            return Err(Error::DimensionMismatch {
                expected: self.mode_count(),
                actual: len,
            });
        }
        Ok(())
    }
}

/// Parses whitespace-separated rows into a matrix. Does not validate.
pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("empty matrix".into()));
    }
    let cols = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::Parse(format!(
            "ragged rows: expected {cols} columns, found {}",
            bad.len()
        )));
    }
    let nrows = rows.len();
    Ok(Matrix::from_row_iterator(
        nrows,
        cols,
        rows.into_iter().flatten(),
    ))
}

/// `V = M σ_c² v vᵀ` with `v` the uniform direction, so every entry is `σ_c²`.
pub fn make_rank1_covariance(params: SignalParams) -> Result<Covariance> {
    params.check()?;
    let m = params.mode_count;
    let amplitude = (m as f64).sqrt() * params.sigma_c;
    let factor = Matrix::from_column_slice(m, 1, uniform_direction(m).as_slice()) * amplitude;
    let matrix = Matrix::from_element(m, m, params.sigma_c * params.sigma_c);
    Ok(Covariance {
        matrix,
        factor: Some(factor),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub mode_count: usize,
    /// `max |V_ij − V_ji| / max |V_ij|` (0 for the zero matrix).
    pub symmetry_defect: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub accepted: bool,
    pub reason: Option<String>,
}

/// Checks symmetry and positive semidefiniteness of a candidate covariance.
pub fn validate_covariance(matrix: &Matrix) -> Result<ValidationReport> {
    let (rows, cols) = matrix.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(Error::InvalidCovariance("empty matrix".into()));
    }
    for r in 0..rows {
        for c in 0..cols {
            if !matrix[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }

    let scale = matrix.amax();
    let asym = (matrix - matrix.transpose()).amax();
    let symmetry_defect = if scale > 0.0 { asym / scale } else { 0.0 };

    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min_eigenvalue = eig.eigenvalues.min();
    let max_eigenvalue = eig.eigenvalues.max();

    let mut reason = None;
    if rows < 2 {
        reason = Some(format!("need at least 2 modes, got {rows}"));
    } else if symmetry_defect > SYMMETRY_TOL {
        reason = Some(format!("asymmetric (relative defect {symmetry_defect:e})"));
    } else if min_eigenvalue < -PSD_TOL * max_eigenvalue.abs().max(f64::MIN_POSITIVE) {
        reason = Some(format!(
            "not positive semidefinite (min eigenvalue {min_eigenvalue:e})"
        ));
    }

    Ok(ValidationReport {
        mode_count: rows,
        symmetry_defect,
        min_eigenvalue,
        max_eigenvalue,
        accepted: reason.is_none(),
        reason,
    })
}

/// Per-mode momentum displacements for one channel use.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementVector {
    pub lambda: Vector,
}

/// Draws `λ = F z` with `z` standard normal and `F Fᵀ = V`.
///
/// The factor is the known one for rank-1 channels and `Q √Λ` (nonzero
/// eigenvalues only) otherwise.
#[derive(Debug, Clone)]
pub struct DisplacementSampler {
    factor: Matrix,
}

impl DisplacementSampler {
    pub fn new(cov: &Covariance) -> Self {
        if let Some(f) = &cov.factor {
            return Self { factor: f.clone() };
        }
        let eig = SymmetricEigen::new(cov.matrix.clone());
        let top = eig.eigenvalues.amax();
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > PSD_TOL * top)
            .collect();
        let m = cov.mode_count();
        let mut factor = Matrix::zeros(m, keep.len());
        for (col, &i) in keep.iter().enumerate() {
            let scale = eig.eigenvalues[i].sqrt();
            factor.set_column(col, &(eig.eigenvectors.column(i) * scale));
        }
        Self { factor }
    }

    pub fn mode_count(&self) -> usize {
        self.factor.nrows()
    }

    /// Number of independent normal draws per sample.
    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn sample(&self, rng: &mut Rng) -> DisplacementVector {
        let z = self.draw_latent(rng);
        DisplacementVector {
            lambda: &self.factor * z,
        }
    }

    /// Coefficients `Fᵀ w`, so that `w·λ = (Fᵀ w)·z` for the latent draw `z`.
    pub fn project_factor(&self, w: &Vector) -> Vector {
        self.factor.tr_mul(w)
    }

    pub(crate) fn draw_latent(&self, rng: &mut Rng) -> Vector {
        let mut z = Vector::zeros(self.rank());
        self.fill_latent(&mut z, rng);
        z
    }

    pub(crate) fn fill_latent(&self, z: &mut Vector, rng: &mut Rng) {
        z.iter_mut()
            .for_each(|x| *x = rng.sample::<f64, _>(StandardNormal));
    }
}

/// One fresh displacement draw from the channel.
pub fn sample_displacement(cov: &Covariance, rng: &mut Rng) -> DisplacementVector {
    DisplacementSampler::new(cov).sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn mat(rows: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn rank1_small() {
        let cov = make_rank1_covariance(SignalParams::new(2, 1.0).unwrap()).unwrap();
        assert_eq!(cov.matrix(), &mat(2, &[1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn rank1_reference_point_spectrum() {
        let cov = make_rank1_covariance(SignalParams::new(21, 0.02).unwrap()).unwrap();
        assert!(cov.matrix().iter().all(|&x| (x - 4e-4).abs() < 1e-18));
        let eig = SymmetricEigen::new(cov.matrix().clone());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((vals[0] - 8.4e-3).abs() < 1e-15);
        assert!(vals[1].abs() < 1e-12 * vals[0]);
        let i = eig.eigenvalues.imax();
        let top = eig.eigenvectors.column(i).into_owned();
        let overlap = top.dot(&uniform_direction(21)).abs();
        assert!((overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank1_zero_signal() {
        let cov = make_rank1_covariance(SignalParams::new(3, 0.0).unwrap()).unwrap();
        assert!(cov.matrix().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank1_rejects_bad_params() {
        assert!(SignalParams::new(1, 0.1).is_err());
        assert!(SignalParams::new(3, f64::NAN).is_err());
        assert!(SignalParams::new(3, f64::INFINITY).is_err());
        let raw = SignalParams {
            mode_count: 1,
            sigma_c: 0.1,
        };
        assert!(make_rank1_covariance(raw).is_err());
    }

    #[test]
    fn validate_examples() {
        let id = validate_covariance(&Matrix::identity(3, 3)).unwrap();
        assert!(id.accepted);

        let indefinite = validate_covariance(&mat(2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(!indefinite.accepted);
        assert!((indefinite.min_eigenvalue + 1.0).abs() < 1e-12);
        assert!((indefinite.max_eigenvalue - 3.0).abs() < 1e-12);

        let asym = validate_covariance(&mat(2, &[1.0, 0.0, 0.1, 1.0])).unwrap();
        assert!(!asym.accepted);
        assert!(asym.reason.unwrap().contains("asymmetric"));
    }

    #[test]
    fn validate_errors() {
        assert!(matches!(
            validate_covariance(&Matrix::zeros(2, 3)),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        ));
        let mut m = Matrix::identity(2, 2);
        m[(1, 0)] = f64::NAN;
        assert!(matches!(
            validate_covariance(&m),
            Err(Error::NonFinite { row: 1, col: 0 })
        ));
    }

    #[test]
    fn psd_tolerance_admits_rounding() {
        let v = Vector::from_vec(vec![0.1, 0.7, -0.3]);
        let mut m = &v * v.transpose();
        m[(0, 0)] -= 1e-13;
        assert!(validate_covariance(&m).unwrap().accepted);
    }

    #[test]
    fn parse_text_matrix() {
        let cov = Covariance::from_text("# header\n2 0.5\n\n0.5 1\n").unwrap();
        assert_eq!(cov.matrix(), &mat(2, &[2.0, 0.5, 0.5, 1.0]));
        assert!(Covariance::from_text("1 2\n3").is_err());
        assert!(Covariance::from_text("1 x\n0 1").is_err());
        assert!(Covariance::from_text("").is_err());
    }

    #[test]
    fn zero_covariance_samples_zero() {
        let cov = make_rank1_covariance(SignalParams::new(4, 0.0).unwrap()).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(sample_displacement(&cov, &mut rng)
                .lambda
                .iter()
                .all(|&x| x == 0.0));
        }
        let general = Covariance::new(Matrix::zeros(3, 3)).unwrap();
        let sampler = DisplacementSampler::new(&general);
        assert_eq!(sampler.rank(), 0);
        assert!(sampler.sample(&mut rng).lambda.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank1_draws_are_uniform_vectors() {
        let cov = make_rank1_covariance(SignalParams::new(5, 0.3).unwrap()).unwrap();
        let sampler = DisplacementSampler::new(&cov);
        let mut rng = Rng::seed_from_u64(9);
        for _ in 0..50 {
            let l = sampler.sample(&mut rng).lambda;
            assert!(l.iter().all(|&x| (x - l[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn rank1_variance_matches() {
        // Var(λ_i) = σ_c² = 4e-4; SE of the sample variance is σ_c²·√(2/n).
        let cov = make_rank1_covariance(SignalParams::new(21, 0.02).unwrap()).unwrap();
        let sampler = DisplacementSampler::new(&cov);
        let mut rng = Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let mut sum_sq = vec![0.0; 21];
        for _ in 0..n {
            let l = sampler.sample(&mut rng).lambda;
            for (s, x) in sum_sq.iter_mut().zip(l.iter()) {
                *s += x * x;
            }
        }
        let se = 4e-4 * (2.0 / n as f64).sqrt();
        for s in sum_sq {
            assert!((s / n as f64 - 4e-4).abs() < 3.0 * se);
        }
    }

    #[test]
    fn seeded_streams_repeat() {
        let cov = Covariance::new(mat(2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let a: Vec<_> = {
            let mut rng = Rng::seed_from_u64(5);
            (0..10)
                .map(|_| sample_displacement(&cov, &mut rng))
                .collect()
        };
        let b: Vec<_> = {
            let mut rng = Rng::seed_from_u64(5);
            (0..10)
                .map(|_| sample_displacement(&cov, &mut rng))
                .collect()
        };
        assert_eq!(a, b);
    }
}
