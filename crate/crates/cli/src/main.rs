//! `vqsense` command-line harness.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 runtime failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vqsense::harness::{
    self, ConfigOverrides, Experiment, ExperimentConfig, RunSummary, StrategyChoice,
};
use vqsense::{seed, validate_covariance, Error, Task};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vqsense",
    version,
    about = "Photon counting vs homodyne learning of weak stochastic signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train at a single point and write per-epoch histories.
    Train(RunArgs),
    /// Final accuracy across a list of signal amplitudes at fixed M.
    SweepSigma(RunArgs),
    /// Final accuracy across mode counts at fixed total amplitude.
    SweepModes(RunArgs),
    /// Compare gain G at σ_c with unit gain at √G·σ_c.
    GainStudy(RunArgs),
    /// Estimate the random-guess accuracy 1/M with Haar-random circuits.
    Baseline(BaselineArgs),
    /// Check a covariance file and print its validation report.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML file with configuration keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    strategy: Option<StrategyChoice>,
    /// Mode count(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<usize>>,
    /// Signal amplitude(s) σ_c, comma separated.
    #[arg(long, value_delimiter = ',')]
    sigma_c: Option<Vec<f64>>,
    /// Squeezing gain(s) G, comma separated.
    #[arg(long, value_delimiter = ',')]
    gain: Option<Vec<f64>>,
    /// √M·σ_c held fixed by the mode sweep.
    #[arg(long)]
    total_amplitude: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    /// Shots per loss evaluation.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    inertia: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    /// Global-best forgetting factor g.
    #[arg(long)]
    forgetting: Option<f64>,
    /// Base seed(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Use this many consecutive seeds starting at the first --seed.
    #[arg(long)]
    repeats: Option<usize>,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// General covariance matrix file (train only).
    #[arg(long)]
    cov_file: Option<PathBuf>,
    /// Angle in degrees between the CCA reference u and the signal direction.
    #[arg(long)]
    u_angle: Option<f64>,
    /// Single-shot samples per arm for the gain-study KS test.
    #[arg(long)]
    ks_samples: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Dump per-shot detector records of each final global best (train only).
    #[arg(long)]
    dump_shots: bool,
}

#[derive(Args)]
struct BaselineArgs {
    /// Mode count(s), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "21")]
    modes: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ValidateArgs {
    /// Whitespace-separated matrix file.
    #[arg(long)]
    cov_file: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            },
            message: e.to_string(),
        }
    }
}

fn resolve(experiment: Experiment, args: RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::defaults_for(experiment);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let file: ConfigOverrides = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.apply(file);
    }
    let seeds = match (args.seed, args.repeats) {
        (Some(s), Some(n)) => {
            if s.len() != 1 {
                return Err(Failure::config("--repeats takes a single --seed"));
            }
            Some((0..n as u64).map(|i| s[0] + i).collect())
        }
        (None, Some(n)) => Some((0..n as u64).collect()),
        (s, None) => s,
    };
    cfg.apply(ConfigOverrides {
        task: args.task,
        strategy: args.strategy,
        modes: args.modes,
        sigma_c: args.sigma_c,
        gain: args.gain,
        total_amplitude: args.total_amplitude,
        particles: args.particles,
        inertia: args.inertia,
        r_max: args.r_max,
        forgetting: args.forgetting,
        epochs: args.epochs,
        shots: args.shots,
        seeds,
        u_angle: args.u_angle,
        cov_file: args.cov_file,
        ks_samples: args.ks_samples,
        threads: args.threads,
        dump_shots: args.dump_shots.then_some(true),
        out: args.out,
    });
    if let Some(path) = &cfg.cov_file {
        if !path.is_file() {
            return Err(Failure::config(format!(
                "covariance file {} not found",
                path.display()
            )));
        }
    }
    cfg.check(experiment)?;
    Ok(cfg)
}

fn report(summary: &RunSummary, cfg: &ExperimentConfig) {
    println!(
        "{} finished: {} runs in {:.1}s -> {}",
        summary.experiment.as_str(),
        summary.points,
        summary.total_wall_time,
        cfg.out.display()
    );
    println!(
        "{:<9} {:>4} {:>10} {:>7} {:>9} {:>9} {:>9} {:>8}",
        "strategy", "M", "sigma_c", "gain", "arm", "median", "iqr", "1/M"
    );
    for g in &summary.groups {
        let arm = match g.arm {
            Some(a) => format!("{a:?}").to_lowercase(),
            None => "-".into(),
        };
        println!(
            "{:<9} {:>4} {:>10.4e} {:>7} {:>9} {:>9.4} {:>9.4} {:>8.4}",
            g.strategy.as_str(),
            g.modes,
            g.sigma_c,
            g.gain,
            arm,
            g.acc_gbest.median,
            g.acc_gbest.q75 - g.acc_gbest.q25,
            g.baseline
        );
    }
    if let Some(gr) = &summary.gain_report {
        for c in &gr.comparisons {
            println!(
                "G={:<6} {:<9} KS D={:.4} p={:.3} medians_in_iqr={}",
                c.study_gain,
                c.strategy.as_str(),
                c.ks.statistic,
                c.ks.p_value,
                c.medians_in_iqr
            );
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let experiment = match cli.command {
        Command::Train(a) => (Experiment::Train, a),
        Command::SweepSigma(a) => (Experiment::SweepSigma, a),
        Command::SweepModes(a) => (Experiment::SweepModes, a),
        Command::GainStudy(a) => (Experiment::GainStudy, a),
        Command::Baseline(a) => return baseline(a),
        Command::Validate(a) => return validate(a),
    };
    let (experiment, args) = experiment;
    let cfg = resolve(experiment, args)?;
    let summary = harness::execute(experiment, &cfg)?;
    report(&summary, &cfg);
    Ok(())
}

fn baseline(args: BaselineArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for &m in &args.modes {
        let mut rng = seed::rng_from(args.seed, &[seed::label("baseline"), m as u64]);
        let mean = vqsense::random_guess_baseline(m, args.samples, &mut rng)?;
        rows.push(serde_json::json!({
            "M": m,
            "samples": args.samples,
            "mean_accuracy": mean,
            "expected": 1.0 / m as f64,
        }));
    }
    let text = serde_json::to_string_pretty(&rows).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.cov_file)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", args.cov_file.display())))?;
    let matrix = vqsense::channel::parse_matrix(&text)?;
    let report = validate_covariance(&matrix)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{json}");
    if report.accepted {
        Ok(())
    } else {
        Err(Failure::config(format!(
            "covariance rejected: {}",
            report.reason.as_deref().unwrap_or("unknown reason")
        )))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
