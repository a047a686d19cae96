//! `certigrad experiment`: run a named experiment and write CSV tables plus
//! `report.json` into an output directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use certigrad::pipeline::Layer;
use certigrad_experiments::audit::tightness_audit;
use certigrad_experiments::calibrate::{calibrate_baseline, CalibrationConfig};
use certigrad_experiments::jacobian::{jacobian_compare, JacCompareConfig, Stats, TrialFailure};
use certigrad_experiments::poly::{poly_bilevel, PolyBilevelConfig};
use certigrad_experiments::trace::BilevelTrace;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::output::{write_atomic, write_json, Environment};
use crate::problem::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExperimentName {
    PolyBilevel,
    StereoCalib,
    JacCompare,
    TightnessAudit,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PolyBilevel => "poly-bilevel",
            Self::StereoCalib => "stereo-calib",
            Self::JacCompare => "jac-compare",
            Self::TightnessAudit => "tightness-audit",
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    ConfigRead { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Config { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("invalid --jobs: {0}")]
    Jobs(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Seed of the simulated stereo instance.
    pub seed: u64,
}

/// Column reference shown by `certigrad experiment --help`.
pub const CSV_HELP: &str = "\
Output files (in --out-dir):
  report.json  config echo, seed, environment, summary, per-trial failures, timings

  poly-bilevel / trace.csv, stereo-calib / trace.csv:
    trial, iteration, loss, grad_norm, tightness_ratio, param_0.., sol_0..
    poly-bilevel: param_0..param_6 are the coefficients θ_0..θ_6 and
    sol_0, sol_1 the inner minimizer x* and y(x*).
    stereo-calib: param_0 is the baseline b; there are no sol_ columns.
    tightness_ratio is the smallest ratio among the inner solves.

  stereo-calib / trials.csv:
    trial, b_init, b_final, final_error, iterations, converged

  jac-compare / trials.csv:
    trial, tightness_ratio, is_vs_cift, is_vs_fd, cift_vs_fd, is_vs_svd,
    cift_vs_svd, rot_vs_svd, trans_vs_svd
    Differences are relative ∞-norms of pose Jacobians; rot/trans_vs_svd are
    RMS differences of the IS Jacobian blocks. Empty cells mean the oracle
    did not apply to that trial.

  tightness-audit / rounds.csv:
    case, round, num_constraints, tightness_ratio, verdict

Timings live only in report.json; CSV files are byte-identical for a fixed
config and seed.";

pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

/// What a run produced, for the exit code and the console summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trials: usize,
    pub failures: usize,
    pub files: Vec<PathBuf>,
    pub headline: String,
}

impl RunOutcome {
    pub fn all_failed(&self) -> bool {
        self.trials > 0 && self.failures == self.trials
    }
}

#[derive(Serialize)]
struct Report<'a, C: Serialize> {
    schema_version: &'static str,
    command: &'static str,
    experiment: &'static str,
    config: &'a C,
    seed: Option<u64>,
    environment: Environment,
    summary: Value,
    failures: Vec<TrialFailure>,
    timings: Value,
}

fn load_config<C: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<C, ExperimentError> {
    let Some(path) = path else { return Ok(C::default()) };
    let p = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|source| ExperimentError::ConfigRead { path: p.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Config { path: p, source })
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn file<F>(&mut self, name: &str, fill: F) -> Result<(), ExperimentError>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        write_atomic(&path, fill)
            .map_err(|source| ExperimentError::Output { path: path.display().to_string(), source })?;
        self.files.push(path);
        Ok(())
    }

    fn report<C: Serialize>(&mut self, report: &Report<C>) -> Result<(), ExperimentError> {
        let path = self.dir.join("report.json");
        write_json(&path, report)
            .map_err(|source| ExperimentError::Output { path: path.display().to_string(), source })?;
        self.files.push(path);
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn trace_summary(trace: &BilevelTrace) -> Value {
    json!({
        "converged": trace.converged,
        "iterations": trace.records.len().saturating_sub(1),
        "final_loss": trace.final_loss(),
        "final_params": trace.final_params(),
        "final_solution": trace.records.last().map(|r| &r.solution),
        "min_tightness_ratio": trace.records.iter().map(|r| r.tightness_ratio).reduce(f64::min),
        "jumps": trace.jumps,
        "abort": trace.abort,
    })
}

fn run_poly(opts: &RunOptions, layer: &Layer<f64>, w: &mut Writer) -> Result<RunOutcome, ExperimentError> {
    let cfg: PolyBilevelConfig = load_config(&opts.config)?;
    let start = Instant::now();
    let trace = poly_bilevel(&cfg, layer);
    let wall = start.elapsed().as_secs_f64();
    w.file("trace.csv", |out| BilevelTrace::write_csv(&[(0, &trace)], out).map_err(csv_io))?;
    let failures: Vec<TrialFailure> =
        trace.abort.iter().map(|m| TrialFailure { trial: 0, message: m.clone() }).collect();
    let headline = format!(
        "converged={} iterations={} final_loss={:.3e}",
        trace.converged,
        trace.records.len().saturating_sub(1),
        trace.final_loss().unwrap_or(f64::NAN)
    );
    w.report(&Report {
        schema_version: SCHEMA_VERSION,
        command: "experiment",
        experiment: "poly-bilevel",
        config: &cfg,
        seed: opts.seed,
        environment: Environment::capture(),
        summary: trace_summary(&trace),
        failures: failures.clone(),
        timings: json!({ "wall_seconds": wall }),
    })?;
    Ok(RunOutcome { trials: 1, failures: failures.len(), files: vec![], headline })
}

fn run_calib(opts: &RunOptions, layer: &Layer<f64>, w: &mut Writer) -> Result<RunOutcome, ExperimentError> {
    let mut cfg: CalibrationConfig = load_config(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let results = calibrate_baseline(&cfg, layer);
    let wall = start.elapsed().as_secs_f64();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (trial, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => ok.push(t),
            Err(message) => failures.push(TrialFailure { trial, message }),
        }
    }
    let traces: Vec<(usize, &BilevelTrace)> = ok.iter().map(|t| (t.trial, &t.trace)).collect();
    w.file("trace.csv", |out| BilevelTrace::write_csv(&traces, out).map_err(csv_io))?;
    w.file("trials.csv", |out| {
        let mut c = csv::Writer::from_writer(out);
        c.write_record(["trial", "b_init", "b_final", "final_error", "iterations", "converged"])?;
        for t in &ok {
            c.write_record([
                t.trial.to_string(),
                format!("{:e}", t.b_init),
                format!("{:e}", t.b_final),
                format!("{:e}", t.final_error),
                t.trace.records.len().saturating_sub(1).to_string(),
                t.trace.converged.to_string(),
            ])?;
        }
        c.flush()
    })?;
    let errors: Vec<f64> = ok.iter().map(|t| t.final_error).collect();
    let stats = Stats::of(&errors);
    let headline = format!(
        "{} of {} trials ok, mean final baseline error {}",
        ok.len(),
        cfg.trials,
        stats.map_or("n/a".into(), |s| format!("{:.3e}", s.mean))
    );
    w.report(&Report {
        schema_version: SCHEMA_VERSION,
        command: "experiment",
        experiment: "stereo-calib",
        config: &cfg,
        seed: Some(cfg.seed),
        environment: Environment::capture(),
        summary: json!({
            "true_baseline": cfg.camera.b,
            "final_error": stats,
            "converged": ok.iter().filter(|t| t.trace.converged).count(),
        }),
        failures: failures.clone(),
        timings: json!({ "wall_seconds": wall }),
    })?;
    Ok(RunOutcome { trials: cfg.trials, failures: failures.len(), files: vec![], headline })
}

fn run_jac(opts: &RunOptions, layer: &Layer<f64>, w: &mut Writer) -> Result<RunOutcome, ExperimentError> {
    let mut cfg: JacCompareConfig = load_config(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let report = jacobian_compare(&cfg, layer);
    let wall = start.elapsed().as_secs_f64();
    w.file("trials.csv", |out| report.write_csv(out).map_err(csv_io))?;
    let summary = report.summary();
    let (is_s, cift_s) = report.mean_seconds();
    let headline = format!(
        "{} of {} trials ok, mean IS-vs-CIFT {}",
        report.trials.len(),
        cfg.trials,
        summary.is_vs_cift.map_or("n/a".into(), |s| format!("{:.3e}", s.mean))
    );
    w.report(&Report {
        schema_version: SCHEMA_VERSION,
        command: "experiment",
        experiment: "jac-compare",
        config: &cfg,
        seed: Some(cfg.seed),
        environment: Environment::capture(),
        summary: serde_json::to_value(&summary).unwrap_or(Value::Null),
        failures: report.failures.clone(),
        timings: json!({ "wall_seconds": wall, "mean_is_seconds": is_s, "mean_cift_seconds": cift_s }),
    })?;
    Ok(RunOutcome { trials: cfg.trials, failures: report.failures.len(), files: vec![], headline })
}

fn run_audit(opts: &RunOptions, layer: &Layer<f64>, w: &mut Writer) -> Result<RunOutcome, ExperimentError> {
    let mut cfg: AuditConfig = load_config(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let results = tightness_audit(cfg.seed, layer);
    let wall = start.elapsed().as_secs_f64();
    let trials = results.len();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (trial, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => cases.push(c),
            Err(message) => failures.push(TrialFailure { trial, message }),
        }
    }
    w.file("rounds.csv", |out| {
        let mut c = csv::Writer::from_writer(out);
        c.write_record(["case", "round", "num_constraints", "tightness_ratio", "verdict"])?;
        for case in &cases {
            for r in &case.rounds {
                c.write_record([
                    case.name.clone(),
                    r.round.to_string(),
                    r.num_constraints.to_string(),
                    format!("{:e}", r.tightness_ratio),
                    r.verdict.clone(),
                ])?;
            }
        }
        c.flush()
    })?;
    let headline = cases
        .iter()
        .map(|c| match c.tight_round {
            Some(r) => format!("{}: tight at round {r} after adding {}", c.name, c.added),
            None => format!("{}: not tight ({})", c.name, c.message),
        })
        .collect::<Vec<_>>()
        .join("; ");
    w.report(&Report {
        schema_version: SCHEMA_VERSION,
        command: "experiment",
        experiment: "tightness-audit",
        config: &cfg,
        seed: Some(cfg.seed),
        environment: Environment::capture(),
        summary: json!({ "cases": cases }),
        failures: failures.clone(),
        timings: json!({ "wall_seconds": wall }),
    })?;
    Ok(RunOutcome { trials, failures: failures.len(), files: vec![], headline })
}

pub fn run(name: ExperimentName, opts: &RunOptions) -> Result<RunOutcome, ExperimentError> {
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|source| ExperimentError::Output { path: opts.out_dir.display().to_string(), source })?;
    let layer = Layer::default();
    let mut w = Writer { dir: &opts.out_dir, files: Vec::new() };
    let body = |w: &mut Writer| match name {
        ExperimentName::PolyBilevel => run_poly(opts, &layer, w),
        ExperimentName::StereoCalib => run_calib(opts, &layer, w),
        ExperimentName::JacCompare => run_jac(opts, &layer, w),
        ExperimentName::TightnessAudit => run_audit(opts, &layer, w),
    };
    let mut outcome = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| ExperimentError::Jobs(e.to_string()))?
            .install(|| body(&mut w))?,
        None => body(&mut w)?,
    };
    outcome.files = w.files;
    Ok(outcome)
}
