//! Detector simulation and loss observables.
//!
//! Conventions: a vacuum mode displaced by `λ` yields homodyne outcomes
//! `Normal(λ, 1/2)` and photon counts `Poisson(λ²)`. Squeezing with gain `G`
//! amplifies every collective displacement to `√G·λ` without adding noise.
//!
//! Each shot consumes a fresh channel use, so a `K`-shot loss evaluation
//! averages over both the signal distribution and detector noise.
//!
//! Per-shot losses: `−n_w` (PCA, counting), `½ − p_w²` (PCA, homodyne; the
//! vacuum floor is a known constant and is removed so the estimator is
//! unbiased), `−(n_+ − n_−)/2` (CCA, counting) and `−p_w·p_u` (CCA,
//! homodyne). Every loss has mean `−G·ϑ(w)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{Covariance, DisplacementSampler, SignalParams};
use crate::circuit::CircuitConfig;
use crate::error::{Error, Result};
use crate::{Rng, Vector};

/// Homodyne vacuum noise variance.
pub const VACUUM_VARIANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(rename = "counting")]
    PhotonCounting,
    Homodyne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pca,
    Cca,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::PhotonCounting, Strategy::Homodyne];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::PhotonCounting => "counting",
            Strategy::Homodyne => "homodyne",
        }
    }
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Pca => "pca",
            Task::Cca => "cca",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "counting" | "photon-counting" | "photoncounting" => Ok(Strategy::PhotonCounting),
            "homodyne" => Ok(Strategy::Homodyne),
            other => Err(Error::Parse(format!("unknown strategy {other:?}"))),
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Task::Pca),
            "cca" => Ok(Task::Cca),
            other => Err(Error::Parse(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSpec {
    pub strategy: Strategy,
    pub task: Task,
    pub shots_per_eval: usize,
    pub gain: f64,
}

impl DetectionSpec {
    pub fn new(strategy: Strategy, task: Task, shots_per_eval: usize, gain: f64) -> Result<Self> {
        let spec = Self {
            strategy,
            task,
            shots_per_eval,
            gain,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.shots_per_eval < 1 {
            return Err(Error::InvalidSpec("shots_per_eval must be >= 1".into()));
        }
        check_gain(self.gain)
    }

    pub(crate) fn check_circuit(&self, circuit: &CircuitConfig) -> Result<()> {
        if self.task == Task::Cca && circuit.u().is_none() {
            return Err(Error::InvalidSpec(
                "CCA requires a circuit with a reference vector u".into(),
            ));
        }
        Ok(())
    }
}

fn check_gain(gain: f64) -> Result<()> {
    if !gain.is_finite() || gain < 1.0 {
        return Err(Error::InvalidSpec(format!("gain must be >= 1, got {gain}")));
    }
    Ok(())
}

/// Per-shot detector record, written as one JSON line in debug dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot: usize,
    pub lambda_w: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_u: Option<f64>,
    /// Counts `[n_w]` or `[n_+, n_-]`; quadratures `[p_w]` or `[p_w, p_u]`.
    pub outcomes: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    /// Mean of the per-shot losses.
    pub value: f64,
    pub shots: usize,
    pub raw_outcomes: Option<Vec<ShotRecord>>,
}

/// Balanced beamsplitter: `λ_± = (λ_w ± λ_u)/√2`.
pub fn interfere(lambda_w: f64, lambda_u: f64) -> (f64, f64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    ((lambda_w + lambda_u) * s, (lambda_w - lambda_u) * s)
}

fn poisson(mean: f64, rng: &mut Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // mean is finite and positive here, so construction cannot fail
    Poisson::new(mean)
        .map(|p| p.sample(rng) as u64)
        .unwrap_or(0)
}

/// Photon count of a vacuum mode displaced by `λ`, amplified to `√G·λ`.
pub fn sample_photon_count(lambda: f64, gain: f64, rng: &mut Rng) -> u64 {
    poisson(gain * lambda * lambda, rng)
}

/// Homodyne outcome `Normal(√G·λ, 1/2)`.
pub fn sample_homodyne(lambda: f64, gain: f64, rng: &mut Rng) -> f64 {
    gain.sqrt() * lambda + VACUUM_VARIANCE.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Loss evaluation bound to one channel.
///
/// Projects the channel factor onto `w` and `u` once per evaluation, so each
/// shot draws only `rank(V)` normals instead of a full `M`-vector.
#[derive(Debug, Clone)]
pub struct LossEvaluator {
    spec: DetectionSpec,
    sampler: DisplacementSampler,
}

impl LossEvaluator {
    pub fn new(spec: DetectionSpec, cov: &Covariance) -> Result<Self> {
        spec.check()?;
        Ok(Self {
            spec,
            sampler: DisplacementSampler::new(cov),
        })
    }

    pub fn spec(&self) -> &DetectionSpec {
        &self.spec
    }

    pub fn mode_count(&self) -> usize {
        self.sampler.mode_count()
    }

    pub fn evaluate(&self, circuit: &CircuitConfig, rng: &mut Rng) -> Result<LossSample> {
        self.run(circuit, rng, false)
    }

    /// Same as [`evaluate`](Self::evaluate) but keeps every shot record.
    pub fn evaluate_recorded(&self, circuit: &CircuitConfig, rng: &mut Rng) -> Result<LossSample> {
        self.run(circuit, rng, true)
    }

    fn run(&self, circuit: &CircuitConfig, rng: &mut Rng, record: bool) -> Result<LossSample> {
        self.spec.check_circuit(circuit)?;
        if circuit.mode_count() != self.mode_count() {
            return Err(Error::DimensionMismatch {
                expected: self.mode_count(),
                actual: circuit.mode_count(),
            });
        }
        let coef_w = self.sampler.project_factor(circuit.w());
        let coef_u = circuit.u().map(|u| self.sampler.project_factor(u));
        let k = self.spec.shots_per_eval;
        let mut records = record.then(|| Vec::with_capacity(k));
        let mut z = Vector::zeros(self.sampler.rank());
        let mut total = 0.0;
        for shot in 0..k {
            self.sampler.fill_latent(&mut z, rng);
            let lambda_w = coef_w.dot(&z);
            let lambda_u = coef_u.as_ref().map(|c| c.dot(&z));
            let (loss, outcomes) = self.shot(lambda_w, lambda_u, rng);
            total += loss;
            if let Some(records) = records.as_mut() {
                records.push(ShotRecord {
                    shot,
                    lambda_w,
                    lambda_u,
                    outcomes: outcomes.to_vec(),
                    loss,
                });
            }
        }
        Ok(LossSample {
            value: total / k as f64,
            shots: k,
            raw_outcomes: records,
        })
    }

    fn shot(&self, lambda_w: f64, lambda_u: Option<f64>, rng: &mut Rng) -> (f64, Outcomes) {
        let gain = self.spec.gain;
        match (self.spec.task, self.spec.strategy) {
            (Task::Pca, Strategy::PhotonCounting) => {
                let n = sample_photon_count(lambda_w, gain, rng) as f64;
                (-n, Outcomes::One(n))
            }
            (Task::Pca, Strategy::Homodyne) => {
                // the known vacuum floor is subtracted so the loss is unbiased
                let p = sample_homodyne(lambda_w, gain, rng);
                (VACUUM_VARIANCE - p * p, Outcomes::One(p))
            }
            (Task::Cca, Strategy::PhotonCounting) => {
                let amp = gain.sqrt();
                let (plus, minus) = interfere(amp * lambda_w, amp * lambda_u.unwrap_or(0.0));
                let n_plus = sample_photon_count(plus, 1.0, rng) as f64;
                let n_minus = sample_photon_count(minus, 1.0, rng) as f64;
                (-(n_plus - n_minus) / 2.0, Outcomes::Two(n_plus, n_minus))
            }
            (Task::Cca, Strategy::Homodyne) => {
                let pw = sample_homodyne(lambda_w, gain, rng);
                let pu = sample_homodyne(lambda_u.unwrap_or(0.0), gain, rng);
                (-pw * pu, Outcomes::Two(pw, pu))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Outcomes {
    One(f64),
    Two(f64, f64),
}

impl Outcomes {
    fn to_vec(self) -> Vec<f64> {
        match self {
            Outcomes::One(a) => vec![a],
            Outcomes::Two(a, b) => vec![a, b],
        }
    }
}

/// Runs `spec.shots_per_eval` shots against fresh channel draws and returns
/// the mean loss. `E[value] = −G·ϑ_task(w)`.
pub fn sample_loss(
    spec: &DetectionSpec,
    circuit: &CircuitConfig,
    cov: &Covariance,
    rng: &mut Rng,
) -> Result<LossSample> {
    LossEvaluator::new(*spec, cov)?.evaluate(circuit, rng)
}

/// Writes shot records as JSON lines.
pub fn write_shot_records<W: Write>(mut out: W, records: &[ShotRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Leading-order per-shot mean and variance of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossMoments {
    pub mean: f64,
    pub variance: f64,
}

impl LossMoments {
    /// Variance of the `K`-shot average.
    pub fn for_shots(&self, shots: usize) -> LossMoments {
        LossMoments {
            mean: self.mean,
            variance: self.variance / shots as f64,
        }
    }
}

/// Analytic loss moments for one shot, given the unamplified collective
/// moments `E[λ_w²]`, `E[λ_u²]` and `E[λ_w λ_u]`; the gain scales all
/// three.
///
/// * PCA, counting: `(−s, s(s+1))` (thermal photon statistics).
/// * PCA, homodyne: `(−s, 2(s+½)²)`.
/// * CCA, counting (halved count difference): `(−c, (s_w+s_u)/4)`.
/// * CCA, homodyne: `(−c, (s_w+½)(s_u+½) + c²)` from Isserlis' theorem.
pub fn loss_moments_analytic(
    spec: &DetectionSpec,
    variance_w: f64,
    variance_u: Option<f64>,
    cross: Option<f64>,
) -> Result<LossMoments> {
    spec.check()?;
    let bad = |msg: String| Err(Error::InconsistentMoments(msg));
    if !variance_w.is_finite() || variance_w < 0.0 {
        return bad(format!(
            "variance_w must be finite and >= 0, got {variance_w}"
        ));
    }
    let g = spec.gain;
    let sw = g * variance_w;
    match spec.task {
        Task::Pca => Ok(match spec.strategy {
            Strategy::PhotonCounting => LossMoments {
                mean: -sw,
                variance: sw * (sw + 1.0),
            },
            Strategy::Homodyne => LossMoments {
                mean: -sw,
                variance: 2.0 * (sw + VACUUM_VARIANCE).powi(2),
            },
        }),
        Task::Cca => {
            let (Some(variance_u), Some(cross)) = (variance_u, cross) else {
                return bad("CCA moments need variance_u and cross".into());
            };
            if !variance_u.is_finite() || variance_u < 0.0 || !cross.is_finite() {
                return bad(format!("invalid variance_u {variance_u} or cross {cross}"));
            }
            let bound = (variance_w * variance_u).sqrt();
            if cross.abs() > bound * (1.0 + 1e-9) + 1e-300 {
                return bad(format!(
                    "|cross| = {} exceeds sqrt(variance_w * variance_u) = {bound}",
                    cross.abs()
                ));
            }
            let su = g * variance_u;
            let c = g * cross;
            Ok(match spec.strategy {
                Strategy::PhotonCounting => LossMoments {
                    mean: -c,
                    variance: (sw + su) / 4.0,
                },
                Strategy::Homodyne => LossMoments {
                    mean: -c,
                    variance: (sw + VACUUM_VARIANCE) * (su + VACUUM_VARIANCE) + c * c,
                },
            })
        }
    }
}

/// Maps a gained run onto the equivalent unsqueezed one: `σ_c → √G·σ_c`.
pub fn apply_gain_equivalence(params: SignalParams, gain: f64) -> Result<SignalParams> {
    check_gain(gain)?;
    SignalParams::new(params.mode_count, params.sigma_c * gain.sqrt())
}

/// Collective second moments `(E[λ_w²], E[λ_u²], E[λ_wλ_u])` for a circuit.
pub fn collective_moments(
    circuit: &CircuitConfig,
    cov: &Covariance,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let w: &Vector = circuit.w();
    let sw = crate::circuit::pca_objective(w, cov)?;
    match circuit.u() {
        Some(u) => Ok((
            sw,
            Some(crate::circuit::pca_objective(u, cov)?),
            Some(crate::circuit::cca_objective(w, u, cov)?),
        )),
        None => Ok((sw, None, None)),
    }
}
