//! `certigrad solve`: certify one or more problem files and optionally
//! backpropagate a loss gradient.

use std::time::Instant;

use certigrad::certify::{certify, Verdict};
use certigrad::diff::{backprop, BackpropMethod, GradientReport};
use certigrad::pipeline::Layer;
use certigrad::qcqp::HomQcqp;
use certigrad::sdp::{build_shor_relaxation, solve_sdp, SdpStatus};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::output::Environment;
use crate::problem::{ProblemFile, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    None,
    Is,
    Cift,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub ratio_threshold: f64,
    pub grad: GradMode,
    pub loss_grad: Option<Vec<f64>>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        let layer = Layer::<f64>::default();
        Self {
            tol: layer.sdp.tol,
            max_iter: layer.sdp.max_iter,
            ratio_threshold: layer.certify.ratio_threshold,
            grad: GradMode::None,
            loss_grad: None,
        }
    }
}

impl SolveConfig {
    pub fn layer(&self) -> Layer<f64> {
        let mut layer = Layer::default();
        layer.sdp.tol = self.tol;
        layer.sdp.max_iter = self.max_iter;
        layer.certify.ratio_threshold = self.ratio_threshold;
        layer.method = match self.grad {
            GradMode::Cift => BackpropMethod::Cift,
            _ => BackpropMethod::Is,
        };
        layer
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SdpSummary {
    pub status: String,
    pub iterations: usize,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
    pub gap: f64,
    pub dropped_rows: Vec<usize>,
    pub polished: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub min_eig: f64,
    pub second_eig: f64,
    pub stationarity_residual: f64,
    pub corank1: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradient {
    pub name: String,
    pub value: f64,
    pub grad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lsqr {
    pub iterations: usize,
    pub residual: f64,
    pub stop: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientBlock {
    pub method: GradMode,
    /// `dℓ/dQ`, row-major.
    pub grad_q: Vec<Vec<f64>>,
    /// `dℓ/dA_i` for the user constraints, row-major.
    pub grad_a: Vec<Vec<Vec<f64>>>,
    /// `dℓ/dθ` for the named parameters of the problem file.
    pub params: Vec<ParamGradient>,
    pub lsqr: Option<Lsqr>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub sdp_seconds: f64,
    pub certify_seconds: f64,
    pub backprop_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub path: String,
    pub n: usize,
    pub m: usize,
    /// `TightCertified`, `TightUncertified`, `NotTight` or `SolverFailure`.
    pub verdict: String,
    pub objective: Option<f64>,
    pub relaxation_value: Option<f64>,
    pub tightness_ratio: Option<f64>,
    pub x: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub certificate: Option<Certificate>,
    pub sdp: SdpSummary,
    pub gradient: Option<GradientBlock>,
    pub error: Option<String>,
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub schema_version: &'static str,
    pub command: &'static str,
    pub config: SolveConfig,
    pub instances: Vec<InstanceReport>,
    pub environment: Environment,
    /// `solve` draws no random numbers.
    pub seed: Option<u64>,
}

pub const EXIT_TIGHT: i32 = 0;
pub const EXIT_PARSE: i32 = 1;
pub const EXIT_NOT_TIGHT: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

impl SolveReport {
    /// Worst exit code over the instances.
    pub fn exit_code(&self) -> i32 {
        self.instances
            .iter()
            .map(|i| match i.verdict.as_str() {
                "TightCertified" if i.error.is_none() => EXIT_TIGHT,
                "TightCertified" | "SolverFailure" => EXIT_FAILURE,
                _ => EXIT_NOT_TIGHT,
            })
            .max()
            .unwrap_or(EXIT_TIGHT)
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// The `gradient` block for a library gradient report.
pub fn gradient_block(method: GradMode, report: &GradientReport<f64>, params: Vec<ParamGradient>) -> GradientBlock {
    GradientBlock {
        method,
        grad_q: rows(&report.grad_q),
        grad_a: report.grad_a.iter().map(rows).collect(),
        params,
        lsqr: (report.method == BackpropMethod::Is).then(|| Lsqr {
            iterations: report.lsqr_iters,
            residual: report.lsqr_residual,
            stop: format!("{:?}", report.lsqr_stop),
        }),
    }
}

pub fn solve_instance(path: &str, file: &ProblemFile, q: &HomQcqp<f64>, cfg: &SolveConfig) -> InstanceReport {
    let layer = cfg.layer();
    let start = Instant::now();
    let sdp = solve_sdp(&build_shor_relaxation(q), &layer.sdp);
    let mut timings = Timings { sdp_seconds: start.elapsed().as_secs_f64(), ..Default::default() };
    let mut report = InstanceReport {
        path: path.to_string(),
        n: q.n(),
        m: q.m(),
        verdict: "SolverFailure".into(),
        objective: None,
        relaxation_value: None,
        tightness_ratio: None,
        x: None,
        lambda: None,
        certificate: None,
        sdp: SdpSummary {
            status: format!("{:?}", sdp.status),
            iterations: sdp.iterations,
            primal_infeas: sdp.residuals.primal_infeas,
            dual_infeas: sdp.residuals.dual_infeas,
            gap: sdp.residuals.gap,
            dropped_rows: sdp.dropped_rows.clone(),
            polished: sdp.polished,
        },
        gradient: None,
        error: None,
        timings: Timings::default(),
    };
    if sdp.status != SdpStatus::Optimal {
        report.error = Some(format!("SDP solver stopped with {:?}", sdp.status));
        report.timings = timings;
        return report;
    }
    let start = Instant::now();
    let cert = match certify(q, &sdp, &layer.certify) {
        Ok(c) => c,
        Err(e) => {
            report.error = Some(e.to_string());
            report.timings = timings;
            return report;
        }
    };
    timings.certify_seconds = start.elapsed().as_secs_f64();
    report.verdict = format!("{:?}", cert.verdict);
    report.objective = Some(cert.objective);
    report.relaxation_value = Some(cert.relaxation_value);
    report.tightness_ratio = Some(cert.tightness_ratio);
    report.x = Some(cert.x.iter().copied().collect());
    report.lambda = Some(cert.lambda.iter().copied().collect());
    report.certificate = Some(Certificate {
        min_eig: cert.certificate_min_eig,
        second_eig: cert.certificate_second_eig,
        stationarity_residual: cert.stationarity_residual,
        corank1: cert.corank1,
    });

    if let (GradMode::Is | GradMode::Cift, Some(g)) = (cfg.grad, &cfg.loss_grad) {
        if cert.verdict != Verdict::TightCertified {
            report.error = Some("gradient skipped: solution is not certified".into());
        } else {
            let start = Instant::now();
            let incoming = DVector::from_column_slice(g);
            let result = backprop(q, &cert, &incoming, layer.method, &layer.backprop).and_then(|r| {
                let theta = r.chain(q, file.params.len())?;
                Ok((r, theta))
            });
            timings.backprop_seconds = Some(start.elapsed().as_secs_f64());
            match result {
                Ok((r, theta)) => {
                    let params = file
                        .params
                        .iter()
                        .zip(theta.iter())
                        .map(|(p, &grad)| ParamGradient { name: p.name.clone(), value: p.value, grad })
                        .collect();
                    report.gradient = Some(gradient_block(cfg.grad, &r, params));
                }
                Err(e) => report.error = Some(e.to_string()),
            }
        }
    }
    report.timings = timings;
    report
}

/// Parses `--loss-grad`: a comma/whitespace separated list, or `@path` to
/// read the same format (or a JSON array) from a file.
pub fn parse_loss_grad(spec: &str) -> Result<Vec<f64>, String> {
    let text = match spec.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?,
        None => spec.to_string(),
    };
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| format!("--loss-grad: {e}"));
    }
    trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(k, s)| s.parse::<f64>().map_err(|e| format!("--loss-grad entry {k} ({s:?}): {e}")))
        .collect()
}

pub fn run(paths: &[String], cfg: &SolveConfig) -> Result<SolveReport, String> {
    let mut problems = Vec::with_capacity(paths.len());
    for path in paths {
        let file = ProblemFile::read(path).map_err(|e| e.to_string())?;
        let q = file.to_qcqp().map_err(|e| format!("{path}: {e}"))?;
        if let Some(g) = &cfg.loss_grad {
            if g.len() != q.n() {
                return Err(format!("--loss-grad has {} entries but {path} has n = {}", g.len(), q.n()));
            }
        }
        problems.push((path, file, q));
    }
    let instances = problems.iter().map(|(path, file, q)| solve_instance(path, file, q, cfg)).collect();
    Ok(SolveReport {
        schema_version: SCHEMA_VERSION,
        command: "solve",
        config: cfg.clone(),
        instances,
        environment: Environment::capture(),
        seed: None,
    })
}
