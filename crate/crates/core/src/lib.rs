//! Simulation and training harness for physical-layer learning of weak
//! stochastic quadrature displacements.
//!
//! A zero-mean Gaussian displacement channel with covariance `V` acts on
//! vacuum probes. A linear-optical circuit projects the displacements onto
//! collective modes, which are read out either by photon counting or by
//! homodyne detection. A noise-robust particle swarm trains the circuit for
//! principal component analysis (PCA) or collective cross-correlation
//! analysis (CCA), and the harness sweeps signal strength, mode count and
//! squeezing gain.
//!
//! Module map:
//!
//! * [`channel`]: covariance construction, validation and displacement sampling.
//! * [`circuit`]: collective-mode vectors, projection and analytic objectives.
//! * [`measurement`]: detector simulation, loss observables and moment formulas.
//! * [`trainer`]: particle swarm with forgetting-factor global best.
//! * [`oracles`]: exact optima and the random-guess baseline.
//! * [`harness`]: experiment configurations, sweeps and CSV/JSON output.

pub mod channel;
pub mod circuit;
pub mod error;
pub mod harness;
pub mod measurement;
pub mod oracles;
pub mod seed;
pub mod stats;
pub mod trainer;

pub use channel::{
    make_rank1_covariance, sample_displacement, validate_covariance, Covariance,
    DisplacementSampler, DisplacementVector, SignalParams, ValidationReport,
};
pub use circuit::{
    cca_objective, orthonormalize, pca_objective, project_modes, CircuitConfig,
    CollectiveDisplacement,
};
pub use error::{Error, Result};
pub use measurement::{
    apply_gain_equivalence, interfere, loss_moments_analytic, sample_homodyne, sample_loss,
    sample_photon_count, DetectionSpec, LossMoments, LossSample, ShotRecord, Strategy, Task,
};
pub use oracles::{cca_optimum, principal_eigvec, random_guess_baseline, OracleResult};
pub use trainer::{
    accuracy, train, update_gbest, AccuracyValue, EpochRecord, Particle, PsoParams, Swarm,
    TrainingHistory, TrainingSetup,
};

/// Dense real vector used for displacements and circuit rows.
pub type Vector = nalgebra::DVector<f64>;
/// Dense real matrix used for covariances.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Random stream used by every sampler in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
