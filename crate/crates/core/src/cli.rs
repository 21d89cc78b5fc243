//! Command-line interface over the library: simulate trajectories, print
//! closed-form reports, train a single learner, run batch experiments, and
//! execute the verification batteries.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::activation::Activation;
use crate::experiment::{self, ExperimentConfig};
use crate::learner::{self, LearnerConfig, MuMode};
use crate::simulator::{derive_seed, gaussian_inputs, random_system, simulate, stream_rng};
use crate::theory::{theory_report, RegimeMode, TheoryConstants};
use crate::verify;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nl-sysid",
    version,
    about = "Simulate, identify, and certify nonlinear state-space systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one randomly drawn system driven by Gaussian inputs and
    /// emit the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Print the closed-form scales, conditioning, and hyperparameters for
    /// a synthetic system as JSON.
    Theory(TheoryArgs),
    /// Train one learner on one simulated trajectory and write its
    /// optimization trace and final weights.
    Train(TrainArgs),
    /// Run a batch experiment from a JSON configuration file.
    Experiment(ExperimentArgs),
    /// Run the verification batteries and report each check.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationKind {
    Linear,
    Relu,
    Leaky,
    Blended,
}

fn build_activation(kind: ActivationKind, beta: f64) -> Result<Activation> {
    match kind {
        ActivationKind::Linear => Ok(Activation::Linear),
        ActivationKind::Relu => Ok(Activation::Relu),
        ActivationKind::Leaky => Activation::leaky_relu(beta),
        ActivationKind::Blended => Activation::blend(Activation::Relu, beta),
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// State dimension.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Input dimension.
    #[arg(long, default_value_t = 4)]
    p: usize,
    /// Number of simulated steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Spectral norm of the drawn state matrix.
    #[arg(long, default_value_t = 0.5)]
    a_norm: f64,
    #[arg(long, value_enum, default_value_t = ActivationKind::Leaky)]
    activation: ActivationKind,
    /// Slope parameter for the leaky and blended activations.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BKind {
    /// Rectangular identity.
    Identity,
    /// Independent standard Gaussian entries.
    Gaussian,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeKind {
    Stable,
    Odd,
    Unstable,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// Spectral norm of the state matrix (scaled identity).
    #[arg(long, default_value_t = 0.5)]
    a_norm: f64,
    /// Slope bound of the (leaky) activation.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = BKind::Identity)]
    b: BKind,
    #[arg(long, value_enum, default_value_t = ModeKind::Stable)]
    mode: ModeKind,
    /// Sampling horizon for the unstable mode.
    #[arg(long, default_value_t = 1)]
    t0: u64,
    /// Horizon to evaluate the state scale at; defaults to the truncation
    /// length or sampling horizon.
    #[arg(long)]
    t: Option<u64>,
    /// Truncation-length constant.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Sample-complexity constant.
    #[arg(long, default_value_t = 1.0)]
    big_c: f64,
    /// Step-size constant.
    #[arg(long, default_value_t = 1.0)]
    c0: f64,
    /// Seed for the Gaussian input matrix.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Number of regression samples (the trajectory runs one step longer).
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    a_norm: f64,
    #[arg(long, value_enum, default_value_t = ActivationKind::Leaky)]
    activation: ActivationKind,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 20_000)]
    iterations: u64,
    /// Scaling: "empirical", "theoretical", or a positive number.
    #[arg(long, default_value = "empirical")]
    mu: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trace_stride: u64,
    /// Directory to write trace.csv and weights.json into.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configuration's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Deterministic,
    Statistical,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectories per statistical covariance check.
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Emit the reports as a JSON array instead of lines.
    #[arg(long)]
    json: bool,
}

fn parse_mu(raw: &str) -> Result<MuMode> {
    match raw {
        "empirical" => Ok(MuMode::Empirical),
        "theoretical" => Ok(MuMode::Theoretical),
        other => other
            .parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0 && v.is_finite())
            .map(MuMode::Explicit)
            .ok_or_else(|| {
                Error::Config(format!(
                    "the scaling must be \"empirical\", \"theoretical\", or a positive number, got {other:?}"
                ))
            }),
    }
}

/// Parse and run a CLI invocation, returning the process exit code: 0 on
/// success, 1 when a verification suite reports failures, 2 on usage or
/// runtime errors.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Simulate(args) => run_simulate(args),
        Command::Theory(args) => run_theory(args),
        Command::Train(args) => run_train(args),
        Command::Experiment(args) => run_experiment_cmd(args),
        Command::Verify(args) => run_verify(args),
    }
}

fn run_simulate(args: SimulateArgs) -> Result<i32> {
    let act = build_activation(args.activation, args.beta)?;
    let mut rng = stream_rng(args.seed, 0);
    let params = random_system(args.n, args.p, args.a_norm, act, &mut rng)?;
    let inputs = gaussian_inputs(args.p, args.steps, &mut rng);
    let traj = simulate(&params, &inputs, None)?;
    let csv = traj.to_csv();
    match args.out {
        Some(path) => {
            std::fs::write(&path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn run_theory(args: TheoryArgs) -> Result<i32> {
    use nalgebra::DMatrix;
    let act = Activation::leaky_relu(args.beta)?;
    let a = DMatrix::identity(args.n, args.n) * args.a_norm;
    let b = match args.b {
        BKind::Identity => DMatrix::identity(args.n, args.p),
        BKind::Gaussian => {
            let mut rng = stream_rng(args.seed, 0);
            DMatrix::from_fn(args.n, args.p, |_, _| {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
            })
        }
    };
    let params = crate::simulator::SystemParams::new(a, b, act)?;
    let mode = match args.mode {
        ModeKind::Stable => RegimeMode::Stable,
        ModeKind::Odd => RegimeMode::Odd,
        ModeKind::Unstable => RegimeMode::Unstable { t0: args.t0 },
    };
    let consts = TheoryConstants { c: args.c, big_c: args.big_c, c0: args.c0 };
    let report = theory_report(&params, mode, args.t, &consts)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("plain record"));
    Ok(0)
}

fn run_train(args: TrainArgs) -> Result<i32> {
    let act = build_activation(args.activation, args.beta)?;
    // The same stream layout as a batch experiment's first realization:
    // data from stream 0, SGD sampling from stream 1.
    let mut data_rng = stream_rng(args.seed, 0);
    let params = random_system(args.n, args.p, args.a_norm, act.clone(), &mut data_rng)?;
    let inputs = gaussian_inputs(args.p, args.samples + 1, &mut data_rng);
    let traj = simulate(&params, &inputs, None)?;
    let mu = match parse_mu(&args.mu)? {
        MuMode::Empirical => learner::empirical_scaling(&traj)?,
        MuMode::Theoretical => {
            let scale = crate::theory::b_t(
                crate::theory::spectral_norm(params.a()),
                crate::theory::spectral_norm(params.b()),
                crate::theory::Horizon::Infinite,
            )?;
            1.0 / scale
        }
        MuMode::Explicit(v) => v,
    };
    let ds = learner::build_dataset(&traj, mu)?;
    let truth = learner::reparam_truth(params.a(), params.b(), mu)?;
    let cfg = LearnerConfig {
        eta: args.eta,
        iterations: args.iterations,
        theta0: None,
        seed: derive_seed(args.seed, 1),
        trace_stride: args.trace_stride,
    };
    let trace = learner::sgd_train(&ds, &act, &cfg, Some(&truth))?;
    std::fs::create_dir_all(&args.out)?;
    let trace_path = args.out.join("trace.csv");
    std::fs::write(&trace_path, trace.to_csv())?;
    let weights_path = args.out.join("weights.json");
    std::fs::write(&weights_path, trace.weights_json())?;
    println!("wrote {}", trace_path.display());
    println!("wrote {}", weights_path.display());
    println!("mu {}", mu);
    println!(
        "final normalized error {:.6e}, normalized loss {:.6e}",
        trace.final_normalized_error.expect("truth supplied"),
        trace.final_normalized_loss
    );
    Ok(0)
}

fn run_experiment_cmd(args: ExperimentArgs) -> Result<i32> {
    let raw = std::fs::read_to_string(&args.config)?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{e}")))?;
    if let Some(out) = args.out {
        config.output_dir = Some(out);
    }
    let out_dir = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: set output_dir or pass --out".into()))?;
    let result = experiment::run_experiment(&config)?;
    let written = experiment::write_experiment_outputs(&result, &out_dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    for outcome in &result.outcomes {
        let finals: Vec<f64> = outcome
            .runs
            .iter()
            .map(|r| r.trace.final_normalized_error.expect("experiments track the truth"))
            .collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("{}: mean final normalized error {:.6e}", outcome.label, mean);
    }
    Ok(0)
}

fn run_verify(args: VerifyArgs) -> Result<i32> {
    let mut reports = Vec::new();
    if args.suite != Suite::Statistical {
        reports.extend(verify::deterministic_battery(args.seed));
    }
    if args.suite != Suite::Deterministic {
        reports.extend(verify::covariance_battery(args.seed, args.samples));
    }
    if args.json {
        println!("{}", verify::reports_json(&reports));
    } else {
        for report in &reports {
            println!("{}", report.line());
        }
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed == 0 {
        eprintln!("all {} checks passed", reports.len());
        Ok(0)
    } else {
        eprintln!("{failed} of {} checks failed", reports.len());
        Ok(1)
    }
}
