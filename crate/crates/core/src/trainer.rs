//! Noise-robust particle swarm training of the circuit direction `w`.
//!
//! Each epoch every particle moves with inertia and is pulled toward the
//! epoch-best configuration and the global best, is re-normalized (and made
//! orthogonal to `u` for CCA), then receives a freshly sampled loss. A global
//! best that fails to improve is blended toward the epoch best with the
//! forgetting factor `g`, which washes out optima that only looked good
//! because of measurement noise.
//!
//! Random streams are derived from `(seed, epoch, particle)`, so results do
//! not depend on how particle evaluations are scheduled across threads.

use std::io::{Read, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::Covariance;
use crate::circuit::{orthonormalize, CircuitConfig};
use crate::error::{Error, Result};
use crate::measurement::{DetectionSpec, LossEvaluator, LossSample, Strategy, Task};
use crate::oracles::{cca_optimum, haar_unit_vector, principal_eigvec, OracleResult};
use crate::seed;
use crate::{Rng, Vector};

/// Stream label for the smoothed global-best re-evaluation.
const GBEST_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoParams {
    pub particle_count: usize,
    pub inertia: f64,
    pub r_max: f64,
    pub forgetting: f64,
    pub epochs: usize,
    pub shots_per_eval: usize,
    pub seed: u64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self {
            particle_count: 40,
            inertia: 0.8,
            r_max: 0.5,
            forgetting: 0.1,
            epochs: 200,
            shots_per_eval: 2500,
            seed: 0,
        }
    }
}

impl PsoParams {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.particle_count < 2 {
            return bad(format!(
                "particle_count must be >= 2, got {}",
                self.particle_count
            ));
        }
        if !(0.0..1.0).contains(&self.inertia) {
            return bad(format!("inertia must be in [0, 1), got {}", self.inertia));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return bad(format!("r_max must be > 0, got {}", self.r_max));
        }
        if !(0.0..=1.0).contains(&self.forgetting) {
            return bad(format!(
                "forgetting must be in [0, 1], got {}",
                self.forgetting
            ));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.shots_per_eval < 1 {
            return bad("shots_per_eval must be >= 1".into());
        }
        Ok(())
    }
}

/// Anything that can produce a sampled loss for a circuit.
pub trait Objective: Sync {
    fn evaluate(&self, circuit: &CircuitConfig, rng: &mut Rng) -> Result<LossSample>;
}

impl Objective for LossEvaluator {
    fn evaluate(&self, circuit: &CircuitConfig, rng: &mut Rng) -> Result<LossSample> {
        LossEvaluator::evaluate(self, circuit, rng)
    }
}

impl<F> Objective for F
where
    F: Fn(&CircuitConfig, &mut Rng) -> Result<LossSample> + Sync,
{
    fn evaluate(&self, circuit: &CircuitConfig, rng: &mut Rng) -> Result<LossSample> {
        self(circuit, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vector,
    pub velocity: Vector,
    pub last_loss: f64,
}

/// A configuration together with the loss it was last sampled at.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub position: Vector,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    /// Lowest sampled loss of the current epoch.
    pub best: Scored,
    /// Smoothed global best.
    pub gbest: Scored,
    reference: Option<Vector>,
    epoch: u64,
}

/// `m_a·d + r₁(b − w) + r₂(g − w)`.
pub fn velocity_update(
    position: &Vector,
    velocity: &Vector,
    best: &Vector,
    gbest: &Vector,
    inertia: f64,
    r1: f64,
    r2: f64,
) -> Vector {
    velocity * inertia + (best - position) * r1 + (gbest - position) * r2
}

fn random_direction(m: usize, reference: Option<&Vector>, rng: &mut Rng) -> CircuitConfig {
    loop {
        if let Ok(c) = orthonormalize(&haar_unit_vector(m, rng), reference) {
            return c;
        }
    }
}

fn particle_rng(seed: u64, epoch: u64, index: u64) -> Rng {
    seed::rng_from(seed, &[epoch, index])
}

fn argmin(particles: &[Particle]) -> Scored {
    let (i, p) = particles
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.last_loss.total_cmp(&b.last_loss).then(ia.cmp(ib)))
        .expect("swarm has at least two particles");
    debug_assert!(i < particles.len());
    Scored {
        position: p.position.clone(),
        loss: p.last_loss,
    }
}

impl Swarm {
    /// Random unit initial positions, zero velocities, one loss sample each.
    /// The global best starts at the epoch-0 best.
    pub fn init(
        params: &PsoParams,
        mode_count: usize,
        reference: Option<Vector>,
        objective: &impl Objective,
    ) -> Result<Self> {
        params.check()?;
        let particles = (0..params.particle_count)
            .into_par_iter()
            .map(|j| {
                let mut rng = particle_rng(params.seed, 0, j as u64);
                let circuit = random_direction(mode_count, reference.as_ref(), &mut rng);
                let loss = objective.evaluate(&circuit, &mut rng)?.value;
                Ok(Particle {
                    position: circuit.w().clone(),
                    velocity: Vector::zeros(mode_count),
                    last_loss: loss,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let best = argmin(&particles);
        Ok(Self {
            particles,
            gbest: best.clone(),
            best,
            reference,
            epoch: 0,
        })
    }

    /// Builds a swarm from explicit particles, for tests and resumption.
    pub fn from_parts(
        particles: Vec<Particle>,
        gbest: Scored,
        reference: Option<Vector>,
        epoch: u64,
    ) -> Self {
        let best = argmin(&particles);
        Self {
            particles,
            best,
            gbest,
            reference,
            epoch,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn reference(&self) -> Option<&Vector> {
        self.reference.as_ref()
    }

    pub fn circuit(&self, position: &Vector) -> Result<CircuitConfig> {
        CircuitConfig::new(position.clone(), self.reference.clone())
    }

    /// One swarm move: velocity and position update, projection back onto the
    /// constraint set, fresh loss per particle, new epoch best.
    pub fn pso_step(&mut self, params: &PsoParams, objective: &impl Objective) -> Result<()> {
        let epoch = self.epoch + 1;
        let best = &self.best.position;
        let gbest = &self.gbest.position;
        let reference = self.reference.as_ref();
        self.particles
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(j, p)| -> Result<()> {
                let mut rng = particle_rng(params.seed, epoch, j as u64);
                let r1 = rng.random_range(0.0..params.r_max);
                let r2 = rng.random_range(0.0..params.r_max);
                p.velocity = velocity_update(
                    &p.position,
                    &p.velocity,
                    best,
                    gbest,
                    params.inertia,
                    r1,
                    r2,
                );
                let raw = &p.position + &p.velocity;
                let circuit = match orthonormalize(&raw, reference) {
                    Ok(c) => c,
                    Err(Error::Degenerate(_)) => random_direction(raw.len(), reference, &mut rng),
                    Err(e) => return Err(e),
                };
                p.last_loss = objective.evaluate(&circuit, &mut rng)?.value;
                p.position = circuit.w().clone();
                Ok(())
            })?;
        self.best = argmin(&self.particles);
        self.epoch = epoch;
        Ok(())
    }

    /// Replaces the global best by an improving epoch best; otherwise blends
    /// it toward the epoch best with weight `g` and re-samples its loss.
    ///
    /// With `g = 0` a non-improving epoch leaves the global best untouched.
    pub fn update_gbest(&mut self, params: &PsoParams, objective: &impl Objective) -> Result<()> {
        if self.best.loss < self.gbest.loss {
            self.gbest = self.best.clone();
            return Ok(());
        }
        let g = params.forgetting;
        if g == 0.0 {
            return Ok(());
        }
        let blended = &self.gbest.position * (1.0 - g) + &self.best.position * g;
        let circuit = match orthonormalize(&blended, self.reference.as_ref()) {
            Ok(c) => c,
            // gbest and best cancel exactly; keep the stored global best
            Err(Error::Degenerate(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut rng = particle_rng(params.seed, self.epoch, GBEST_STREAM);
        let loss = objective.evaluate(&circuit, &mut rng)?.value;
        self.gbest = Scored {
            position: circuit.w().clone(),
            loss,
        };
        Ok(())
    }
}

/// Free-function form of [`Swarm::update_gbest`].
pub fn update_gbest(
    swarm: &mut Swarm,
    params: &PsoParams,
    objective: &impl Objective,
) -> Result<()> {
    swarm.update_gbest(params, objective)
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AccuracyValue(pub f64);

impl AccuracyValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `(w·w*)²` for unit vectors.
pub fn accuracy(w: &Vector, w_star: &Vector) -> Result<AccuracyValue> {
    if w.len() != w_star.len() {
        return Err(Error::DimensionMismatch {
            expected: w_star.len(),
            actual: w.len(),
        });
    }
    for v in [w, w_star] {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::NotUnitNorm(n));
        }
    }
    Ok(AccuracyValue(w.dot(w_star).powi(2).clamp(0.0, 1.0)))
}

/// Everything [`train`] needs for one run.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub task: Task,
    pub strategy: Strategy,
    pub gain: f64,
    pub covariance: Covariance,
    pub reference: Option<Vector>,
    /// Ground truth for accuracy.
    pub target: OracleResult,
    pub pso: PsoParams,
}

impl TrainingSetup {
    /// Target taken from the optimum of `covariance` itself.
    pub fn new(
        task: Task,
        strategy: Strategy,
        gain: f64,
        covariance: Covariance,
        reference: Option<Vector>,
        pso: PsoParams,
    ) -> Result<Self> {
        let target = match task {
            Task::Pca => principal_eigvec(&covariance),
            Task::Cca => {
                let u = reference.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("CCA training requires a reference vector u".into())
                })?;
                cca_optimum(&covariance, u)?
            }
        };
        Self::with_target(task, strategy, gain, covariance, reference, target, pso)
    }

    /// Explicit target, e.g. the signal direction of a zero-amplitude channel
    /// whose own optimum is undefined.
    pub fn with_target(
        task: Task,
        strategy: Strategy,
        gain: f64,
        covariance: Covariance,
        reference: Option<Vector>,
        target: OracleResult,
        pso: PsoParams,
    ) -> Result<Self> {
        pso.check()?;
        DetectionSpec::new(strategy, task, pso.shots_per_eval, gain)?;
        let m = covariance.mode_count();
        if task == Task::Cca && reference.is_none() {
            return Err(Error::InvalidConfig(
                "CCA training requires a reference vector u".into(),
            ));
        }
        if task == Task::Pca && reference.is_some() {
            return Err(Error::InvalidConfig("PCA takes no reference vector".into()));
        }
        if let Some(u) = &reference {
            covariance.check_dim(u.len())?;
            let n = u.norm();
            if (n - 1.0).abs() > crate::circuit::UNIT_TOL {
                return Err(Error::NotUnitNorm(n));
            }
        }
        if target.w_star.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: target.w_star.len(),
            });
        }
        Ok(Self {
            task,
            strategy,
            gain,
            covariance,
            reference,
            target,
            pso,
        })
    }

    pub fn detection(&self) -> DetectionSpec {
        DetectionSpec {
            strategy: self.strategy,
            task: self.task,
            shots_per_eval: self.pso.shots_per_eval,
            gain: self.gain,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_best: f64,
    pub loss_gbest: f64,
    pub acc_best: f64,
    pub acc_gbest: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch-best and global-best positions, one pair per record.
    pub best_positions: Vec<Vector>,
    pub gbest_positions: Vec<Vector>,
}

impl TrainingHistory {
    pub fn final_record(&self) -> &EpochRecord {
        self.records.last().expect("history has at least one epoch")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_history_csv(out, &self.records)
    }
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "loss_best", "loss_gbest", "acc_best", "acc_gbest"];

pub fn write_history_csv<W: Write>(out: W, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(HISTORY_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv<R: Read>(input: R) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != HISTORY_HEADER {
        return Err(Error::Parse(format!(
            "unexpected history header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Runs `epochs` epochs of swarm updates and records accuracy each epoch.
pub fn train(setup: &TrainingSetup) -> Result<TrainingHistory> {
    let evaluator = LossEvaluator::new(setup.detection(), &setup.covariance)?;
    train_with(setup, &evaluator)
}

/// [`train`] with a caller-supplied objective.
pub fn train_with(setup: &TrainingSetup, objective: &impl Objective) -> Result<TrainingHistory> {
    let params = &setup.pso;
    let m = setup.covariance.mode_count();
    let mut swarm = Swarm::init(params, m, setup.reference.clone(), objective)?;
    let mut history = TrainingHistory {
        records: Vec::with_capacity(params.epochs),
        best_positions: Vec::with_capacity(params.epochs),
        gbest_positions: Vec::with_capacity(params.epochs),
    };
    let mut record = |swarm: &Swarm, epoch: usize| {
        history.records.push(EpochRecord {
            epoch,
            loss_best: swarm.best.loss,
            loss_gbest: swarm.gbest.loss,
            acc_best: setup.target.overlap(&swarm.best.position),
            acc_gbest: setup.target.overlap(&swarm.gbest.position),
        });
        history.best_positions.push(swarm.best.position.clone());
        history.gbest_positions.push(swarm.gbest.position.clone());
    };
    record(&swarm, 0);
    for epoch in 1..params.epochs {
        swarm.pso_step(params, objective)?;
        swarm.update_gbest(params, objective)?;
        record(&swarm, epoch);
    }
    Ok(history)
}
