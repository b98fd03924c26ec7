//! Experiment harness: configurations, the training/sweep/gain experiments,
//! and their on-disk artifacts.
//!
//! Every run writes one directory containing `config.json` (the resolved
//! configuration, defaults included), the result CSVs and `summary.json`.
//! CSV contents depend only on the configuration and seeds; wall-clock
//! timings live in `summary.json` so repeated runs produce identical CSVs.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{make_rank1_covariance, uniform_direction, Covariance, SignalParams};
use crate::circuit::{orthonormalize, CircuitConfig};
use crate::error::{Error, Result};
use crate::measurement::{
    write_shot_records, DetectionSpec, LossEvaluator, ShotRecord, Strategy, Task,
};
use crate::oracles::{cca_optimum, principal_eigvec, OracleResult};
use crate::seed;
use crate::stats::{ks_two_sample, KsResult, Summary};
use crate::trainer::{train, PsoParams, TrainingHistory, TrainingSetup};
use crate::Vector;

/// Which strategies an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyChoice {
    Counting,
    Homodyne,
    Both,
}

impl StrategyChoice {
    pub fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyChoice::Counting => vec![Strategy::PhotonCounting],
            StrategyChoice::Homodyne => vec![Strategy::Homodyne],
            StrategyChoice::Both => Strategy::ALL.to_vec(),
        }
    }
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counting" => Ok(StrategyChoice::Counting),
            "homodyne" => Ok(StrategyChoice::Homodyne),
            "both" => Ok(StrategyChoice::Both),
            _ => Err(Error::Parse(format!(
                "unknown strategy {s:?} (expected counting, homodyne or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    SweepSigma,
    SweepModes,
    GainStudy,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::SweepSigma => "sweep-sigma",
            Experiment::SweepModes => "sweep-modes",
            Experiment::GainStudy => "gain-study",
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategy: StrategyChoice,
    pub modes: Vec<usize>,
    pub sigma_c: Vec<f64>,
    pub gain: Vec<f64>,
    /// `√M·σ_c` held fixed by the mode sweep.
    pub total_amplitude: f64,
    pub particles: usize,
    pub inertia: f64,
    pub r_max: f64,
    pub forgetting: f64,
    pub epochs: usize,
    pub shots: usize,
    pub seeds: Vec<u64>,
    /// Angle between the CCA reference `u` and the signal direction, degrees.
    pub u_angle: f64,
    /// General covariance matrix (training only); overrides `modes`/`sigma_c`.
    pub cov_file: Option<PathBuf>,
    /// Single-shot samples per arm for the gain-study KS test.
    pub ks_samples: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Write per-shot detector records of the final global best (training).
    pub dump_shots: bool,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for each experiment.
    pub fn defaults_for(experiment: Experiment) -> Self {
        let pso = PsoParams::default();
        let ten_seeds: Vec<u64> = (0..10).collect();
        let mut cfg = Self {
            task: Task::Pca,
            strategy: StrategyChoice::Both,
            modes: vec![21],
            sigma_c: vec![0.02],
            gain: vec![1.0],
            total_amplitude: 0.2,
            particles: pso.particle_count,
            inertia: pso.inertia,
            r_max: pso.r_max,
            forgetting: pso.forgetting,
            epochs: pso.epochs,
            shots: pso.shots_per_eval,
            seeds: ten_seeds,
            u_angle: 45.0,
            cov_file: None,
            ks_samples: 100_000,
            threads: 0,
            dump_shots: false,
            out: PathBuf::from(format!("runs/{}", experiment.as_str())),
        };
        match experiment {
            Experiment::Train => {
                cfg.strategy = StrategyChoice::Counting;
                cfg.seeds = vec![0];
            }
            Experiment::SweepSigma => cfg.sigma_c = log_space(1e-3, 0.3, 8),
            Experiment::SweepModes => cfg.modes = vec![6, 11, 21, 41],
            Experiment::GainStudy => {
                cfg.sigma_c = vec![0.004];
                cfg.gain = vec![1.0, 4.0, 25.0];
            }
        }
        cfg
    }

    pub fn pso(&self, seed: u64) -> PsoParams {
        PsoParams {
            particle_count: self.particles,
            inertia: self.inertia,
            r_max: self.r_max,
            forgetting: self.forgetting,
            epochs: self.epochs,
            shots_per_eval: self.shots,
            seed,
        }
    }

    /// Checks the configuration against the needs of `experiment`.
    pub fn check(&self, experiment: Experiment) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.pso(0).check()?;
        if self.modes.is_empty() || self.sigma_c.is_empty() || self.gain.is_empty() {
            return bad("modes, sigma_c and gain lists must be nonempty".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list must be nonempty".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if let Some(&m) = self.modes.iter().find(|&&m| m < 2) {
            return bad(format!("mode counts must be >= 2, got {m}"));
        }
        if let Some(&s) = self.sigma_c.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return bad(format!("sigma_c values must be finite and >= 0, got {s}"));
        }
        if let Some(&g) = self.gain.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return bad(format!("gain values must be finite and > 0, got {g}"));
        }
        if !(self.total_amplitude.is_finite() && self.total_amplitude >= 0.0) {
            return bad(format!(
                "total_amplitude must be finite and >= 0, got {}",
                self.total_amplitude
            ));
        }
        if self.task == Task::Cca && !(self.u_angle > 0.0 && self.u_angle < 90.0) {
            return bad(format!(
                "u_angle must lie strictly between 0 and 90 degrees, got {}",
                self.u_angle
            ));
        }
        if self.ks_samples < 2 {
            return bad("ks_samples must be >= 2".into());
        }
        if self.cov_file.is_some() && experiment != Experiment::Train {
            return bad("cov_file is only supported by the train experiment".into());
        }
        let single = |name: &str, len: usize| {
            if len == 1 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{} takes a single {name} value, got {len}",
                    experiment.as_str()
                )))
            }
        };
        match experiment {
            Experiment::Train => {
                single("modes", self.modes.len())?;
                single("sigma_c", self.sigma_c.len())?;
                single("gain", self.gain.len())?;
            }
            Experiment::SweepSigma => {
                single("modes", self.modes.len())?;
                single("gain", self.gain.len())?;
            }
            Experiment::SweepModes => single("gain", self.gain.len())?,
            Experiment::GainStudy => {
                single("modes", self.modes.len())?;
                single("sigma_c", self.sigma_c.len())?;
            }
        }
        Ok(())
    }

    /// Applies `overrides` on top of this configuration.
    pub fn apply(&mut self, o: ConfigOverrides) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = o.$field { self.$field = v; })*
            };
        }
        set!(
            task,
            strategy,
            modes,
            sigma_c,
            gain,
            total_amplitude,
            particles,
            inertia,
            r_max,
            forgetting,
            epochs,
            shots,
            seeds,
            u_angle,
            ks_samples,
            threads,
            dump_shots,
            out
        );
        if o.cov_file.is_some() {
            self.cov_file = o.cov_file;
        }
    }
}

/// Partial configuration, as read from a config file or command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub task: Option<Task>,
    pub strategy: Option<StrategyChoice>,
    pub modes: Option<Vec<usize>>,
    pub sigma_c: Option<Vec<f64>>,
    pub gain: Option<Vec<f64>>,
    pub total_amplitude: Option<f64>,
    pub particles: Option<usize>,
    pub inertia: Option<f64>,
    pub r_max: Option<f64>,
    pub forgetting: Option<f64>,
    pub epochs: Option<usize>,
    pub shots: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub u_angle: Option<f64>,
    pub cov_file: Option<PathBuf>,
    pub ks_samples: Option<usize>,
    pub threads: Option<usize>,
    pub dump_shots: Option<bool>,
    pub out: Option<PathBuf>,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

/// Unit vector at `angle_deg` to the uniform direction `v`, rotated towards
/// the component of `e₁` orthogonal to `v`.
pub fn reference_vector(mode_count: usize, angle_deg: f64) -> Result<Vector> {
    if mode_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "reference vector needs M >= 2, got {mode_count}"
        )));
    }
    let v = uniform_direction(mode_count);
    let mut e1 = Vector::zeros(mode_count);
    e1[0] = 1.0;
    let perp = orthonormalize(&e1, Some(&v))?;
    let theta = angle_deg.to_radians();
    let u = &v * theta.cos() + perp.w() * theta.sin();
    Ok(&u / u.norm())
}

/// Seed of one experiment point.
pub fn point_seed(
    base: u64,
    task: Task,
    strategy: Strategy,
    mode_count: usize,
    sigma_c: f64,
    gain: f64,
    repeat: usize,
) -> u64 {
    seed::derive(
        base,
        &[
            seed::label(task.as_str()),
            seed::label(strategy.as_str()),
            mode_count as u64,
            sigma_c.to_bits(),
            gain.to_bits(),
            repeat as u64,
        ],
    )
}

/// Channel, reference vector and accuracy target of one point.
#[derive(Debug, Clone)]
pub struct PointModel {
    pub covariance: Covariance,
    pub reference: Option<Vector>,
    pub target: OracleResult,
}

impl PointModel {
    /// Rank-1 channel. The target is the optimum of the unit-amplitude shape,
    /// so it stays defined at `σ_c = 0`.
    pub fn rank1(task: Task, mode_count: usize, sigma_c: f64, u_angle: f64) -> Result<Self> {
        let covariance = make_rank1_covariance(SignalParams::new(mode_count, sigma_c)?)?;
        let shape = make_rank1_covariance(SignalParams::new(mode_count, 1.0)?)?;
        Self::build(task, covariance, &shape, u_angle)
    }

    /// General channel; the target is the optimum of `V` itself.
    pub fn general(task: Task, covariance: Covariance, u_angle: f64) -> Result<Self> {
        let shape = covariance.clone();
        Self::build(task, covariance, &shape, u_angle)
    }

    fn build(task: Task, covariance: Covariance, shape: &Covariance, u_angle: f64) -> Result<Self> {
        let (reference, target) = match task {
            Task::Pca => (None, principal_eigvec(shape)),
            Task::Cca => {
                let u = reference_vector(covariance.mode_count(), u_angle)?;
                let target = cca_optimum(shape, &u)?;
                (Some(u), target)
            }
        };
        Ok(Self {
            covariance,
            reference,
            target,
        })
    }

    pub fn setup(
        &self,
        task: Task,
        strategy: Strategy,
        gain: f64,
        pso: PsoParams,
    ) -> Result<TrainingSetup> {
        TrainingSetup::with_target(
            task,
            strategy,
            gain,
            self.covariance.clone(),
            self.reference.clone(),
            self.target.clone(),
            pso,
        )
    }

    /// Circuit placed at the accuracy target.
    pub fn target_circuit(&self) -> Result<CircuitConfig> {
        CircuitConfig::new(self.target.w_star.clone(), self.reference.clone())
    }
}

/// One training run of the `train` experiment.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub history: TrainingHistory,
    pub shots: Option<Vec<ShotRecord>>,
    pub wall_time: f64,
}

impl TrainingRun {
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}", self.strategy.as_str(), self.seed)
    }
}

/// Final accuracies of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub task: Task,
    pub strategy: Strategy,
    #[serde(rename = "M")]
    pub modes: usize,
    pub sigma_c: f64,
    pub gain: f64,
    pub seed: u64,
    pub final_acc_best: f64,
    pub final_acc_gbest: f64,
    pub epochs: usize,
    /// Random-guess accuracy `1/M`.
    pub baseline: f64,
}

pub const SWEEP_HEADER: [&str; 10] = [
    "task",
    "strategy",
    "M",
    "sigma_c",
    "gain",
    "seed",
    "final_acc_best",
    "final_acc_gbest",
    "epochs",
    "baseline",
];

/// Arm of the squeezing-gain study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainArm {
    /// Gain `G` applied to the base amplitude `σ_c`.
    Amplified,
    /// Unit gain at the rescaled amplitude `√G·σ_c`.
    Rescaled,
}

/// Sweep row of the gain study, tagged with its study gain and arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub study_gain: f64,
    pub arm: GainArm,
    pub task: Task,
    pub strategy: Strategy,
    #[serde(rename = "M")]
    pub modes: usize,
    pub sigma_c: f64,
    pub gain: f64,
    pub seed: u64,
    pub final_acc_best: f64,
    pub final_acc_gbest: f64,
    pub epochs: usize,
    pub baseline: f64,
}

pub const GAIN_HEADER: [&str; 12] = [
    "study_gain",
    "arm",
    "task",
    "strategy",
    "M",
    "sigma_c",
    "gain",
    "seed",
    "final_acc_best",
    "final_acc_gbest",
    "epochs",
    "baseline",
];

/// Loss-distribution and accuracy comparison of the two arms at one gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainComparison {
    pub study_gain: f64,
    pub strategy: Strategy,
    /// KS test between single-shot losses of the two arms at the target circuit.
    pub ks: KsResult,
    pub amplified: Summary,
    pub rescaled: Summary,
    pub medians_in_iqr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub comparisons: Vec<GainComparison>,
}

#[derive(Debug, Clone)]
pub struct GainStudy {
    pub records: Vec<GainRecord>,
    pub report: GainReport,
    pub wall_times: Vec<f64>,
}

/// Sweep rows plus their wall-clock times, in row order.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub records: Vec<SweepRecord>,
    pub wall_times: Vec<f64>,
}

struct PointSpec {
    strategy: Strategy,
    modes: usize,
    sigma_c: f64,
    gain: f64,
    seed: u64,
    repeat: usize,
}

struct PointOutcome {
    history: TrainingHistory,
    wall_time: f64,
}

impl ExperimentConfig {
    fn run_point(&self, p: &PointSpec) -> Result<PointOutcome> {
        let start = Instant::now();
        let model = PointModel::rank1(self.task, p.modes, p.sigma_c, self.u_angle)?;
        let s = point_seed(
            p.seed, self.task, p.strategy, p.modes, p.sigma_c, p.gain, p.repeat,
        );
        let setup = model.setup(self.task, p.strategy, p.gain, self.pso(s))?;
        let history = train(&setup)?;
        Ok(PointOutcome {
            history,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    fn sweep_record(&self, p: &PointSpec, h: &TrainingHistory) -> SweepRecord {
        let last = h.final_record();
        SweepRecord {
            task: self.task,
            strategy: p.strategy,
            modes: p.modes,
            sigma_c: p.sigma_c,
            gain: p.gain,
            seed: p.seed,
            final_acc_best: last.acc_best,
            final_acc_gbest: last.acc_gbest,
            epochs: self.epochs,
            baseline: 1.0 / p.modes as f64,
        }
    }

    /// Runs `f` on the configured worker pool.
    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        if self.threads == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?;
        Ok(pool.install(f))
    }

    fn run_points(&self, points: &[PointSpec]) -> Result<Vec<PointOutcome>> {
        self.in_pool(|| points.par_iter().map(|p| self.run_point(p)).collect())?
    }

    fn sweep(&self, points: Vec<PointSpec>) -> Result<Sweep> {
        let outcomes = self.run_points(&points)?;
        Ok(Sweep {
            records: points
                .iter()
                .zip(&outcomes)
                .map(|(p, o)| self.sweep_record(p, &o.history))
                .collect(),
            wall_times: outcomes.iter().map(|o| o.wall_time).collect(),
        })
    }

    fn points(&self, grid: &[(usize, f64, f64)]) -> Vec<PointSpec> {
        let mut out = Vec::new();
        for &(modes, sigma_c, gain) in grid {
            for strategy in self.strategy.strategies() {
                for (repeat, &seed) in self.seeds.iter().enumerate() {
                    out.push(PointSpec {
                        strategy,
                        modes,
                        sigma_c,
                        gain,
                        seed,
                        repeat,
                    });
                }
            }
        }
        out
    }
}

/// Trains one history per (strategy, seed) at the single configured point.
pub fn run_training(cfg: &ExperimentConfig) -> Result<Vec<TrainingRun>> {
    cfg.check(Experiment::Train)?;
    let gain = cfg.gain[0];
    let (model, modes, sigma_c) = match &cfg.cov_file {
        Some(path) => {
            let cov = Covariance::load(path)?;
            let m = cov.mode_count();
            (
                PointModel::general(cfg.task, cov, cfg.u_angle)?,
                m,
                f64::NAN,
            )
        }
        None => {
            let (m, s) = (cfg.modes[0], cfg.sigma_c[0]);
            (PointModel::rank1(cfg.task, m, s, cfg.u_angle)?, m, s)
        }
    };
    let jobs: Vec<(Strategy, usize, u64)> = cfg
        .strategy
        .strategies()
        .into_iter()
        .flat_map(|st| cfg.seeds.iter().enumerate().map(move |(i, &s)| (st, i, s)))
        .collect();
    let run = |&(strategy, repeat, base): &(Strategy, usize, u64)| -> Result<TrainingRun> {
        let start = Instant::now();
        let s = point_seed(base, cfg.task, strategy, modes, sigma_c, gain, repeat);
        let setup = model.setup(cfg.task, strategy, gain, cfg.pso(s))?;
        let history = train(&setup)?;
        let shots = if cfg.dump_shots {
            let w = history
                .gbest_positions
                .last()
                .expect("nonempty history")
                .clone();
            let circuit = CircuitConfig::new(w, setup.reference.clone())?;
            let evaluator = LossEvaluator::new(setup.detection(), &setup.covariance)?;
            let mut rng = seed::rng_from(s, &[seed::label("shot-dump")]);
            evaluator
                .evaluate_recorded(&circuit, &mut rng)?
                .raw_outcomes
        } else {
            None
        };
        Ok(TrainingRun {
            strategy,
            seed: base,
            history,
            shots,
            wall_time: start.elapsed().as_secs_f64(),
        })
    };
    cfg.in_pool(|| jobs.par_iter().map(run).collect())?
}

/// One record per (σ_c, strategy, seed) at fixed `M`.
pub fn run_sigma_sweep(cfg: &ExperimentConfig) -> Result<Sweep> {
    cfg.check(Experiment::SweepSigma)?;
    let grid: Vec<_> = cfg
        .sigma_c
        .iter()
        .map(|&s| (cfg.modes[0], s, cfg.gain[0]))
        .collect();
    cfg.sweep(cfg.points(&grid))
}

/// One record per (M, strategy, seed) with `σ_c = total_amplitude/√M`.
pub fn run_mode_sweep(cfg: &ExperimentConfig) -> Result<Sweep> {
    cfg.check(Experiment::SweepModes)?;
    let grid: Vec<_> = cfg
        .modes
        .iter()
        .map(|&m| (m, cfg.total_amplitude / (m as f64).sqrt(), cfg.gain[0]))
        .collect();
    cfg.sweep(cfg.points(&grid))
}

/// Single-shot losses at the target circuit of a rank-1 point.
#[allow(clippy::too_many_arguments)]
pub fn single_shot_losses(
    task: Task,
    strategy: Strategy,
    mode_count: usize,
    sigma_c: f64,
    gain: f64,
    u_angle: f64,
    samples: usize,
    base_seed: u64,
) -> Result<Vec<f64>> {
    let model = PointModel::rank1(task, mode_count, sigma_c, u_angle)?;
    let spec = DetectionSpec::new(strategy, task, 1, gain)?;
    let evaluator = LossEvaluator::new(spec, &model.covariance)?;
    let circuit = model.target_circuit()?;
    let s = point_seed(base_seed, task, strategy, mode_count, sigma_c, gain, 0);
    let mut rng = seed::rng_from(s, &[seed::label("single-shot")]);
    (0..samples)
        .map(|_| evaluator.evaluate(&circuit, &mut rng).map(|l| l.value))
        .collect()
}

/// Compares `(G, σ_c)` with `(1, √G·σ_c)` for every configured gain.
pub fn run_gain_study(cfg: &ExperimentConfig) -> Result<GainStudy> {
    cfg.check(Experiment::GainStudy)?;
    let (m, base) = (cfg.modes[0], cfg.sigma_c[0]);
    let arms = |g: f64| {
        [
            (GainArm::Amplified, base, g),
            (GainArm::Rescaled, base * g.sqrt(), 1.0),
        ]
    };
    let mut tags = Vec::new();
    let mut points = Vec::new();
    for &g in &cfg.gain {
        for (arm, sigma_c, gain) in arms(g) {
            for p in cfg.points(&[(m, sigma_c, gain)]) {
                tags.push((g, arm));
                points.push(p);
            }
        }
    }
    let outcomes = cfg.run_points(&points)?;
    let records: Vec<GainRecord> = points
        .iter()
        .zip(&outcomes)
        .zip(&tags)
        .map(|((p, o), &(study_gain, arm))| {
            let r = cfg.sweep_record(p, &o.history);
            GainRecord {
                study_gain,
                arm,
                task: r.task,
                strategy: r.strategy,
                modes: r.modes,
                sigma_c: r.sigma_c,
                gain: r.gain,
                seed: r.seed,
                final_acc_best: r.final_acc_best,
                final_acc_gbest: r.final_acc_gbest,
                epochs: r.epochs,
                baseline: r.baseline,
            }
        })
        .collect();

    let ks_base = cfg.seeds[0];
    let mut comparisons = Vec::new();
    for &g in &cfg.gain {
        for strategy in cfg.strategy.strategies() {
            let [(_, s_a, g_a), (_, s_r, g_r)] = arms(g);
            let (a, r) = cfg.in_pool(|| {
                rayon::join(
                    || {
                        single_shot_losses(
                            cfg.task,
                            strategy,
                            m,
                            s_a,
                            g_a,
                            cfg.u_angle,
                            cfg.ks_samples,
                            ks_base,
                        )
                    },
                    || {
                        single_shot_losses(
                            cfg.task,
                            strategy,
                            m,
                            s_r,
                            g_r,
                            cfg.u_angle,
                            cfg.ks_samples,
                            ks_base,
                        )
                    },
                )
            })?;
            let (a, r) = (a?, r?);
            let acc = |arm: GainArm| -> Vec<f64> {
                records
                    .iter()
                    .filter(|x| x.study_gain == g && x.strategy == strategy && x.arm == arm)
                    .map(|x| x.final_acc_gbest)
                    .collect()
            };
            let amplified = Summary::of(&acc(GainArm::Amplified));
            let rescaled = Summary::of(&acc(GainArm::Rescaled));
            comparisons.push(GainComparison {
                study_gain: g,
                strategy,
                ks: ks_two_sample(&a, &r),
                medians_in_iqr: amplified.medians_in_each_others_iqr(&rescaled),
                amplified,
                rescaled,
            });
        }
    }
    Ok(GainStudy {
        records,
        report: GainReport { comparisons },
        wall_times: outcomes.iter().map(|o| o.wall_time).collect(),
    })
}

fn write_rows<W: Write, T: Serialize>(out: W, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(input: R, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    let found: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Parse(format!("unexpected CSV header {found:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: W, records: &[SweepRecord]) -> Result<()> {
    write_rows(out, &SWEEP_HEADER, records)
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    read_rows(input, &SWEEP_HEADER)
}

pub fn write_gain_csv<W: Write>(out: W, records: &[GainRecord]) -> Result<()> {
    write_rows(out, &GAIN_HEADER, records)
}

pub fn read_gain_csv<R: Read>(input: R) -> Result<Vec<GainRecord>> {
    read_rows(input, &GAIN_HEADER)
}

/// Writes `path` through a temporary file in the same directory and renames
/// it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Aggregate of one (point, strategy) group across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub strategy: Strategy,
    #[serde(rename = "M")]
    pub modes: usize,
    pub sigma_c: f64,
    pub gain: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arm: Option<GainArm>,
    pub baseline: f64,
    pub acc_gbest: Summary,
    pub acc_best: Summary,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub files: Vec<String>,
    pub points: usize,
    pub total_wall_time: f64,
    /// Per-point (or per-run) wall time in seconds, in CSV row order.
    pub wall_times: Vec<f64>,
    pub groups: Vec<GroupSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_report: Option<GainReport>,
}

fn group_summaries<'a>(
    rows: impl Iterator<Item = (&'a SweepRecord, Option<GainArm>)> + Clone,
) -> Vec<GroupSummary> {
    let mut keys: Vec<(Strategy, usize, u64, u64, Option<GainArm>)> = Vec::new();
    for (r, arm) in rows.clone() {
        let k = (
            r.strategy,
            r.modes,
            r.sigma_c.to_bits(),
            r.gain.to_bits(),
            arm,
        );
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let members: Vec<&SweepRecord> = rows
                .clone()
                .filter(|(r, arm)| {
                    (
                        r.strategy,
                        r.modes,
                        r.sigma_c.to_bits(),
                        r.gain.to_bits(),
                        *arm,
                    ) == k
                })
                .map(|(r, _)| r)
                .collect();
            let first = members[0];
            let gbest: Vec<f64> = members.iter().map(|r| r.final_acc_gbest).collect();
            let best: Vec<f64> = members.iter().map(|r| r.final_acc_best).collect();
            GroupSummary {
                strategy: first.strategy,
                modes: first.modes,
                sigma_c: first.sigma_c,
                gain: first.gain,
                arm: k.4,
                baseline: first.baseline,
                acc_gbest: Summary::of(&gbest),
                acc_best: Summary::of(&best),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    experiment: Experiment,
    version: &'static str,
    config: &'a ExperimentConfig,
}

/// Runs `experiment` and writes its artifacts under `cfg.out`.
///
/// The output directory is created before any computation so an unwritable
/// path fails fast; result files are only written once everything succeeded.
pub fn execute(experiment: Experiment, cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.check(experiment)?;
    fs::create_dir_all(&cfg.out)?;
    let start = Instant::now();
    let out = |name: &str| cfg.out.join(name);
    let mut files = vec!["config.json".to_string()];
    let summary = match experiment {
        Experiment::Train => {
            let runs = run_training(cfg)?;
            let mut groups = Vec::new();
            for run in &runs {
                let name = format!("history_{}.csv", run.file_stem());
                write_atomic(&out(&name), |w| run.history.write_csv(w))?;
                files.push(name);
                if let Some(shots) = &run.shots {
                    let name = format!("shots_{}.jsonl", run.file_stem());
                    write_atomic(&out(&name), |w| write_shot_records(w, shots))?;
                    files.push(name);
                }
            }
            for strategy in cfg.strategy.strategies() {
                let mine: Vec<&TrainingRun> =
                    runs.iter().filter(|r| r.strategy == strategy).collect();
                let gbest: Vec<f64> = mine
                    .iter()
                    .map(|r| r.history.final_record().acc_gbest)
                    .collect();
                let best: Vec<f64> = mine
                    .iter()
                    .map(|r| r.history.final_record().acc_best)
                    .collect();
                let modes = mine[0].history.gbest_positions[0].len();
                groups.push(GroupSummary {
                    strategy,
                    modes,
                    sigma_c: if cfg.cov_file.is_some() {
                        f64::NAN
                    } else {
                        cfg.sigma_c[0]
                    },
                    gain: cfg.gain[0],
                    arm: None,
                    baseline: 1.0 / modes as f64,
                    acc_gbest: Summary::of(&gbest),
                    acc_best: Summary::of(&best),
                });
            }
            RunSummary {
                experiment,
                files: Vec::new(),
                points: runs.len(),
                total_wall_time: 0.0,
                wall_times: runs.iter().map(|r| r.wall_time).collect(),
                groups,
                gain_report: None,
            }
        }
        Experiment::SweepSigma | Experiment::SweepModes => {
            let sweep = if experiment == Experiment::SweepSigma {
                run_sigma_sweep(cfg)?
            } else {
                run_mode_sweep(cfg)?
            };
            write_atomic(&out("sweep.csv"), |w| write_sweep_csv(w, &sweep.records))?;
            files.push("sweep.csv".into());
            RunSummary {
                experiment,
                files: Vec::new(),
                points: sweep.records.len(),
                total_wall_time: 0.0,
                groups: group_summaries(sweep.records.iter().map(|r| (r, None))),
                wall_times: sweep.wall_times,
                gain_report: None,
            }
        }
        Experiment::GainStudy => {
            let study = run_gain_study(cfg)?;
            write_atomic(&out("gain_study.csv"), |w| {
                write_gain_csv(w, &study.records)
            })?;
            files.push("gain_study.csv".into());
            write_json(&out("gain_report.json"), &study.report)?;
            files.push("gain_report.json".into());
            let as_sweep: Vec<(SweepRecord, GainArm)> = study
                .records
                .iter()
                .map(|g| {
                    (
                        SweepRecord {
                            task: g.task,
                            strategy: g.strategy,
                            modes: g.modes,
                            sigma_c: g.sigma_c,
                            gain: g.gain,
                            seed: g.seed,
                            final_acc_best: g.final_acc_best,
                            final_acc_gbest: g.final_acc_gbest,
                            epochs: g.epochs,
                            baseline: g.baseline,
                        },
                        g.arm,
                    )
                })
                .collect();
            RunSummary {
                experiment,
                files: Vec::new(),
                points: study.records.len(),
                total_wall_time: 0.0,
                groups: group_summaries(as_sweep.iter().map(|(r, a)| (r, Some(*a)))),
                wall_times: study.wall_times,
                gain_report: Some(study.report),
            }
        }
    };
    write_json(
        &out("config.json"),
        &ConfigSnapshot {
            experiment,
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
        },
    )?;
    files.push("summary.json".into());
    let summary = RunSummary {
        files,
        total_wall_time: start.elapsed().as_secs_f64(),
        ..summary
    };
    write_json(&out("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(experiment: Experiment) -> ExperimentConfig {
        ExperimentConfig {
            particles: 4,
            epochs: 5,
            shots: 20,
            seeds: vec![1, 2],
            ks_samples: 200,
            ..ExperimentConfig::defaults_for(experiment)
        }
    }

    #[test]
    fn reference_vector_angle() {
        for m in [2, 5, 21] {
            let u = reference_vector(m, 45.0).unwrap();
            assert!((u.norm() - 1.0).abs() < 1e-12);
            let c = u.dot(&uniform_direction(m));
            assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
        let u = reference_vector(4, 30.0).unwrap();
        assert!((u.dot(&uniform_direction(4)) - 30f64.to_radians().cos()).abs() < 1e-12);
    }

    #[test]
    fn point_seeds_differ_by_every_coordinate() {
        let s = |b, t, st, m, sg: f64, g: f64, r| point_seed(b, t, st, m, sg, g, r);
        let base = s(0, Task::Pca, Strategy::Homodyne, 21, 0.02, 1.0, 0);
        let variants = [
            s(1, Task::Pca, Strategy::Homodyne, 21, 0.02, 1.0, 0),
            s(0, Task::Cca, Strategy::Homodyne, 21, 0.02, 1.0, 0),
            s(0, Task::Pca, Strategy::PhotonCounting, 21, 0.02, 1.0, 0),
            s(0, Task::Pca, Strategy::Homodyne, 22, 0.02, 1.0, 0),
            s(0, Task::Pca, Strategy::Homodyne, 21, 0.03, 1.0, 0),
            s(0, Task::Pca, Strategy::Homodyne, 21, 0.02, 4.0, 0),
            s(0, Task::Pca, Strategy::Homodyne, 21, 0.02, 1.0, 1),
        ];
        for v in variants {
            assert_ne!(base, v);
        }
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::defaults_for(Experiment::Train);
        ok.check(Experiment::Train).unwrap();
        let mut c = ok.clone();
        c.seeds = vec![3, 3];
        assert!(c.check(Experiment::Train).is_err());
        let mut c = ok.clone();
        c.sigma_c = vec![];
        assert!(c.check(Experiment::SweepSigma).is_err());
        let mut c = ok.clone();
        c.sigma_c = vec![0.01, 0.02];
        assert!(c.check(Experiment::Train).is_err());
        c.check(Experiment::SweepSigma).unwrap();
        let mut c = ok.clone();
        c.modes = vec![1];
        assert!(c.check(Experiment::Train).is_err());
        let mut c = ok.clone();
        c.task = Task::Cca;
        c.u_angle = 0.0;
        assert!(c.check(Experiment::Train).is_err());
        let mut c = ok.clone();
        c.gain = vec![-1.0];
        assert!(c.check(Experiment::Train).is_err());
        let mut c = ok;
        c.cov_file = Some("v.txt".into());
        assert!(c.check(Experiment::SweepModes).is_err());
    }

    #[test]
    fn overrides_apply_field_by_field() {
        let mut c = ExperimentConfig::defaults_for(Experiment::SweepSigma);
        c.apply(ConfigOverrides {
            epochs: Some(7),
            strategy: Some(StrategyChoice::Homodyne),
            ..Default::default()
        });
        assert_eq!(c.epochs, 7);
        assert_eq!(c.strategy, StrategyChoice::Homodyne);
        assert_eq!(c.sigma_c.len(), 8);
    }

    #[test]
    fn log_space_endpoints() {
        let xs = log_space(1e-3, 0.3, 8);
        assert_eq!(xs.len(), 8);
        assert!((xs[0] - 1e-3).abs() < 1e-15);
        assert!((xs[7] - 0.3).abs() < 1e-12);
        assert!(xs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sweep_rows_and_round_trip() {
        let mut cfg = tiny(Experiment::SweepSigma);
        cfg.sigma_c = vec![0.0, 0.05];
        let sweep = run_sigma_sweep(&cfg).unwrap();
        assert_eq!(sweep.records.len(), 2 * 2 * 2);
        assert_eq!(sweep.wall_times.len(), sweep.records.len());
        for r in &sweep.records {
            assert!((0.0..=1.0).contains(&r.final_acc_gbest));
            assert_eq!(r.baseline, 1.0 / 21.0);
        }
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &sweep.records).unwrap();
        let back = read_sweep_csv(buf.as_slice()).unwrap();
        assert_eq!(back, sweep.records);
        let mut again = Vec::new();
        write_sweep_csv(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        let header = String::from_utf8(buf).unwrap();
        assert!(header.starts_with(&SWEEP_HEADER.join(",")));
    }

    #[test]
    fn mode_sweep_holds_total_amplitude() {
        let mut cfg = tiny(Experiment::SweepModes);
        cfg.modes = vec![4, 9];
        cfg.seeds = vec![0];
        let sweep = run_mode_sweep(&cfg).unwrap();
        assert_eq!(sweep.records.len(), 4);
        for r in &sweep.records {
            assert!(((r.modes as f64).sqrt() * r.sigma_c - 0.2).abs() < 1e-12);
            assert_eq!(r.baseline, 1.0 / r.modes as f64);
        }
    }

    #[test]
    fn gain_study_unit_gain_arms_coincide() {
        let mut cfg = tiny(Experiment::GainStudy);
        cfg.gain = vec![1.0, 4.0];
        cfg.strategy = StrategyChoice::Homodyne;
        let study = run_gain_study(&cfg).unwrap();
        assert_eq!(study.records.len(), 2 * 2 * 2);
        let unit: Vec<&GainRecord> = study
            .records
            .iter()
            .filter(|r| r.study_gain == 1.0)
            .collect();
        let (a, r): (Vec<&GainRecord>, Vec<&GainRecord>) =
            unit.iter().partition(|r| r.arm == GainArm::Amplified);
        for (x, y) in a.iter().zip(&r) {
            assert_eq!(x.final_acc_gbest, y.final_acc_gbest);
        }
        let c = &study.report.comparisons[0];
        assert_eq!(c.ks.statistic, 0.0);
        let four = study
            .records
            .iter()
            .find(|r| r.study_gain == 4.0 && r.arm == GainArm::Rescaled)
            .unwrap();
        assert!((four.sigma_c - 0.008).abs() < 1e-15);
        assert_eq!(four.gain, 1.0);

        let mut buf = Vec::new();
        write_gain_csv(&mut buf, &study.records).unwrap();
        assert_eq!(read_gain_csv(buf.as_slice()).unwrap(), study.records);
    }

    #[test]
    fn execute_writes_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Experiment::Train);
        cfg.out = dir.path().join("run");
        cfg.dump_shots = true;
        let summary = execute(Experiment::Train, &cfg).unwrap();
        for f in &summary.files {
            assert!(cfg.out.join(f).is_file(), "{f} missing");
        }
        let history = fs::read(cfg.out.join("history_counting_seed1.csv")).unwrap();
        let records = crate::trainer::read_history_csv(history.as_slice()).unwrap();
        assert_eq!(records.len(), cfg.epochs);
        let shots = fs::read_to_string(cfg.out.join("shots_counting_seed1.jsonl")).unwrap();
        assert_eq!(shots.lines().count(), cfg.shots);
        let snapshot: serde_json::Value =
            serde_json::from_slice(&fs::read(cfg.out.join("config.json")).unwrap()).unwrap();
        assert_eq!(snapshot["config"]["epochs"], 5);
        assert_eq!(snapshot["experiment"], "train");
    }

    #[test]
    fn training_from_covariance_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        fs::write(
            &path,
            "# diag\n0.02 0.0 0.0\n0.0 0.001 0.0\n0.0 0.0 0.001\n",
        )
        .unwrap();
        let mut cfg = tiny(Experiment::Train);
        cfg.cov_file = Some(path);
        cfg.seeds = vec![0];
        let runs = run_training(&cfg).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].history.gbest_positions[0].len(), 3);
    }

    #[test]
    fn atomic_write_leaves_no_file_on_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let err = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            Err(Error::InvalidConfig("boom".into()))
        });
        assert!(err.is_err());
        assert!(!path.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
