//! Batch experiments: draw a fresh system and trajectory per realization,
//! train one learner per activation on the shared data, and aggregate the
//! optimization paths across realizations.
//!
//! Everything written to disk except `timing.json` is byte-deterministic in
//! the experiment seed: realization `r` draws its system and inputs from
//! generator stream `2r` of the seed and its SGD sampling from stream
//! `2r + 1`, so the corpus is independent of evaluation order, and all
//! activations within a realization see identical matrices and inputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::learner::{
    build_dataset, empirical_scaling, reparam_truth, sgd_train, LearnerConfig, MuMode, TrainTrace,
};
use crate::simulator::{derive_seed, gaussian_inputs, random_system, simulate, SystemParams};
use crate::theory::{b_t, spectral_norm, Horizon};
use crate::{Error, Result};

fn default_trace_stride() -> u64 {
    100
}

/// A batch experiment: `realizations` independent systems, each learned
/// under every listed activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub p: usize,
    /// Number of regression samples per realization (the trajectory runs
    /// one step longer).
    pub samples: usize,
    /// Spectral norm given to every drawn state matrix.
    pub a_norm: f64,
    pub activations: Vec<Activation>,
    pub eta: f64,
    pub iterations: u64,
    pub realizations: usize,
    pub seed: u64,
    pub mu_mode: MuMode,
    #[serde(default = "default_trace_stride")]
    pub trace_stride: u64,
    /// Where [`write_experiment_outputs`] puts artifacts; optional so a
    /// caller can override it. Never serialized: the summary of an
    /// experiment must not depend on where its files landed.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::Config("state and input dimensions must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config("need at least 2 regression samples".into()));
        }
        if !(self.a_norm >= 0.0 && self.a_norm.is_finite()) {
            return Err(Error::Config(format!(
                "the spectral norm must be finite and nonnegative, got {}",
                self.a_norm
            )));
        }
        if self.activations.is_empty() {
            return Err(Error::Config("need at least one activation".into()));
        }
        for act in &self.activations {
            act.validate().map_err(|e| Error::Config(format!("bad activation: {e}")))?;
        }
        let mut labels: Vec<String> = self.activations.iter().map(Activation::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.activations.len() {
            return Err(Error::Config("activation labels must be distinct".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("the step size must be positive, got {}", self.eta)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("need at least one iteration".into()));
        }
        if self.realizations == 0 {
            return Err(Error::Config("need at least one realization".into()));
        }
        if self.trace_stride == 0 {
            return Err(Error::Config("the trace stride must be positive".into()));
        }
        if let MuMode::Explicit(v) = self.mu_mode {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("an explicit scaling must be positive, got {v}")));
            }
        }
        if matches!(self.mu_mode, MuMode::Theoretical) && self.a_norm >= 1.0 {
            return Err(Error::Config(
                "the theoretical scaling needs spectral norm < 1; use an explicit or empirical scaling".into(),
            ));
        }
        Ok(())
    }
}

/// One trained run.
#[derive(Debug, Clone)]
pub struct RealizationOutcome {
    pub trace: TrainTrace,
    pub mu: f64,
    /// Training wall time; excluded from every deterministic artifact.
    pub wall_seconds: f64,
}

/// Mean and population standard deviation of the recorded error and loss
/// across realizations at one recorded iteration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AggregateRecord {
    pub iteration: u64,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
}

/// All realizations of one activation, with the cross-realization aggregate.
#[derive(Debug, Clone)]
pub struct ActivationOutcome {
    pub activation: Activation,
    pub label: String,
    pub runs: Vec<RealizationOutcome>,
    pub aggregate: Vec<AggregateRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub outcomes: Vec<ActivationOutcome>,
}

fn resolve_mu(
    mode: MuMode,
    params: &SystemParams,
    traj: &crate::simulator::Trajectory,
) -> Result<f64> {
    let mu = match mode {
        MuMode::Explicit(v) => v,
        MuMode::Empirical => empirical_scaling(traj)?,
        MuMode::Theoretical => {
            let scale =
                b_t(spectral_norm(params.a()), spectral_norm(params.b()), Horizon::Infinite)?;
            1.0 / scale
        }
    };
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!("resolved a degenerate scaling {mu}")));
    }
    Ok(mu)
}

/// Population statistics with an exactness shortcut: identical samples give
/// a standard deviation of exactly zero.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return (values[0], 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
    (mean, var.sqrt())
}

fn aggregate_runs(runs: &[RealizationOutcome]) -> Vec<AggregateRecord> {
    let len = runs[0].trace.records.len();
    assert!(
        runs.iter().all(|r| r.trace.records.len() == len),
        "every run shares the iteration grid"
    );
    (0..len)
        .map(|i| {
            let errs: Vec<f64> = runs
                .iter()
                .map(|r| r.trace.records[i].normalized_error.expect("experiments track the truth"))
                .collect();
            let losses: Vec<f64> =
                runs.iter().map(|r| r.trace.records[i].normalized_loss).collect();
            let (mean_error, std_error) = mean_std(&errs);
            let (mean_loss, std_loss) = mean_std(&losses);
            AggregateRecord {
                iteration: runs[0].trace.records[i].iteration,
                mean_error,
                std_error,
                mean_loss,
                std_loss,
            }
        })
        .collect()
}

/// Run the full batch. Realization `r` draws matrices and inputs from
/// stream `2r` and SGD sampling from stream `2r + 1`, so every activation
/// trains on literally the same system and input sequence, and results are
/// independent of evaluation order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let mut per_activation: Vec<Vec<RealizationOutcome>> =
        config.activations.iter().map(|_| Vec::with_capacity(config.realizations)).collect();

    for r in 0..config.realizations {
        let mut data_rng = crate::simulator::stream_rng(config.seed, 2 * r as u64);
        let base = random_system(
            config.n,
            config.p,
            config.a_norm,
            config.activations[0].clone(),
            &mut data_rng,
        )?;
        let inputs = gaussian_inputs(config.p, config.samples + 1, &mut data_rng);
        let sgd_seed = derive_seed(config.seed, 2 * r as u64 + 1);

        for (ai, act) in config.activations.iter().enumerate() {
            let params = base.with_activation(act.clone());
            let traj = simulate(&params, &inputs, None)?;
            let mu = resolve_mu(config.mu_mode, &params, &traj)?;
            let ds = build_dataset(&traj, mu)?;
            let truth = reparam_truth(params.a(), params.b(), mu)?;
            let cfg = LearnerConfig {
                eta: config.eta,
                iterations: config.iterations,
                theta0: None,
                seed: sgd_seed,
                trace_stride: config.trace_stride,
            };
            let started = Instant::now();
            let trace = sgd_train(&ds, act, &cfg, Some(&truth))?;
            let wall_seconds = started.elapsed().as_secs_f64();
            per_activation[ai].push(RealizationOutcome { trace, mu, wall_seconds });
        }
    }

    let outcomes = config
        .activations
        .iter()
        .zip(per_activation)
        .map(|(act, runs)| ActivationOutcome {
            activation: act.clone(),
            label: act.label(),
            aggregate: aggregate_runs(&runs),
            runs,
        })
        .collect();
    Ok(ExperimentResult { config: config.clone(), outcomes })
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Cross-realization aggregate as CSV.
pub fn render_aggregate_csv(outcome: &ActivationOutcome) -> String {
    let mut out = String::from("iteration,mean_error,std_error,mean_loss,std_loss\n");
    for rec in &outcome.aggregate {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.iteration,
            format_float(rec.mean_error),
            format_float(rec.std_error),
            format_float(rec.mean_loss),
            format_float(rec.std_loss),
        ));
    }
    out
}

/// Deterministic experiment summary: the configuration, and per activation
/// the per-realization scalings and final errors with their statistics.
/// Wall-clock numbers are deliberately kept out of this artifact.
pub fn render_summary_json(result: &ExperimentResult) -> String {
    let activations: Vec<serde_json::Value> = result
        .outcomes
        .iter()
        .map(|o| {
            let finals: Vec<f64> = o
                .runs
                .iter()
                .map(|r| r.trace.final_normalized_error.expect("experiments track the truth"))
                .collect();
            let final_losses: Vec<f64> =
                o.runs.iter().map(|r| r.trace.final_normalized_loss).collect();
            let mus: Vec<f64> = o.runs.iter().map(|r| r.mu).collect();
            let (mean_error, std_error) = mean_std(&finals);
            let (mean_loss, std_loss) = mean_std(&final_losses);
            serde_json::json!({
                "label": o.label,
                "activation": o.activation,
                "final_mean_error": mean_error,
                "final_std_error": std_error,
                "final_mean_loss": mean_loss,
                "final_std_loss": std_loss,
                "final_errors": finals,
                "final_losses": final_losses,
                "mus": mus,
            })
        })
        .collect();
    let value = serde_json::json!({
        "config": result.config,
        "activations": activations,
    });
    serde_json::to_string_pretty(&value).expect("plain records serialize")
}

/// Wall-clock sidecar, separated so the other artifacts stay reproducible.
pub fn render_timing_json(result: &ExperimentResult) -> String {
    let mut total = 0.0;
    let activations: Vec<serde_json::Value> = result
        .outcomes
        .iter()
        .map(|o| {
            let walls: Vec<f64> = o.runs.iter().map(|r| r.wall_seconds).collect();
            total += walls.iter().sum::<f64>();
            serde_json::json!({ "label": o.label, "wall_seconds": walls })
        })
        .collect();
    let value = serde_json::json!({
        "activations": activations,
        "total_wall_seconds": total,
    });
    serde_json::to_string_pretty(&value).expect("plain records serialize")
}

/// Write `{label}.csv` per activation plus `summary.json` and
/// `timing.json`; returns the written paths in a deterministic order.
pub fn write_experiment_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for outcome in &result.outcomes {
        let path = dir.join(format!("{}.csv", outcome.label));
        std::fs::write(&path, render_aggregate_csv(outcome))?;
        written.push(path);
    }
    let summary = dir.join("summary.json");
    std::fs::write(&summary, render_summary_json(result))?;
    written.push(summary);
    let timing = dir.join("timing.json");
    std::fs::write(&timing, render_timing_json(result))?;
    written.push(timing);
    Ok(written)
}

/// The true coefficient block each realization of a configuration trains
/// toward, reconstructed without running the experiment. Exposed for
/// cross-checks that want the exact matrices a run used.
pub fn realized_truth(config: &ExperimentConfig, realization: usize, mu: f64) -> Result<DMatrix<f64>> {
    let mut data_rng = crate::simulator::stream_rng(config.seed, 2 * realization as u64);
    let base = random_system(
        config.n,
        config.p,
        config.a_norm,
        config.activations[0].clone(),
        &mut data_rng,
    )?;
    reparam_truth(base.a(), base.b(), mu)
}
