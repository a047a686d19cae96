//! Solution Jacobians from both backward passes, compared against finite
//! differences and, for scalar weights, against the closed-form registration.

use std::time::Instant;

use certigrad::diff::{backprop, backprop_jacobian, fd_jacobian_oracle, BackpropMethod};
use certigrad::pipeline::Layer;
use certigrad::qcqp::HomQcqp;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::poly::{poly_problem, TABLE_COEFFS};
use crate::stereo::{
    build_localization_qcqp, landmark_grid, pose_difference, pose_output_jacobian, pose_vector, sample_pose,
    umeyama_solve, CameraModel, LocalizationInstance, Pose, PoseSampling, StereoParams, Weighting,
};

/// `‖A − B‖_∞ / ‖B‖_∞` with the max-row-sum matrix norm.
pub fn rel_inf_norm_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let inf = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let denom = inf(b);
    if denom == 0.0 {
        inf(&(a - b))
    } else {
        inf(&(a - b)) / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { count: values.len(), mean, std: var.sqrt(), max: values.iter().copied().fold(f64::MIN, f64::max) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacCompareConfig {
    pub trials: usize,
    pub weighting: Weighting,
    pub seed: u64,
    pub fd_step: f64,
    /// Also difference the full QCQP solve; this dominates the runtime.
    pub fd_oracle: bool,
    pub grid_side: usize,
    pub grid_width: f64,
    pub camera: CameraModel,
    pub sampling: PoseSampling,
}

impl Default for JacCompareConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            weighting: Weighting::Matrix,
            seed: 0,
            fd_step: 1e-5,
            fd_oracle: true,
            grid_side: 8,
            grid_width: 1.0,
            camera: CameraModel::default(),
            sampling: PoseSampling::default(),
        }
    }
}

/// One trial of a Jacobian comparison. Differences are relative ∞-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianTrial {
    pub trial: usize,
    pub tightness_ratio: f64,
    pub is_vs_cift: f64,
    pub is_vs_fd: Option<f64>,
    pub cift_vs_fd: Option<f64>,
    pub is_vs_svd: Option<f64>,
    pub cift_vs_svd: Option<f64>,
    /// Rotation angle and translation distance between the QCQP and SVD poses.
    pub rot_vs_svd: Option<f64>,
    pub trans_vs_svd: Option<f64>,
    #[serde(skip)]
    pub is_seconds: f64,
    #[serde(skip)]
    pub cift_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub is_vs_cift: Option<Stats>,
    pub is_vs_fd: Option<Stats>,
    pub cift_vs_fd: Option<Stats>,
    pub is_vs_svd: Option<Stats>,
    pub cift_vs_svd: Option<Stats>,
    pub rot_rmse: Option<f64>,
    pub trans_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JacobianReport {
    pub trials: Vec<JacobianTrial>,
    pub failures: Vec<TrialFailure>,
}

impl JacobianReport {
    fn from_results(results: Vec<Result<JacobianTrial, TrialFailure>>) -> Self {
        let mut out = Self::default();
        for r in results {
            match r {
                Ok(t) => out.trials.push(t),
                Err(f) => out.failures.push(f),
            }
        }
        out
    }

    pub fn summary(&self) -> JacobianSummary {
        let col = |f: fn(&JacobianTrial) -> Option<f64>| -> Vec<f64> { self.trials.iter().filter_map(f).collect() };
        let rmse =
            |v: Vec<f64>| (!v.is_empty()).then(|| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt());
        JacobianSummary {
            is_vs_cift: Stats::of(&col(|t| Some(t.is_vs_cift))),
            is_vs_fd: Stats::of(&col(|t| t.is_vs_fd)),
            cift_vs_fd: Stats::of(&col(|t| t.cift_vs_fd)),
            is_vs_svd: Stats::of(&col(|t| t.is_vs_svd)),
            cift_vs_svd: Stats::of(&col(|t| t.cift_vs_svd)),
            rot_rmse: rmse(col(|t| t.rot_vs_svd)),
            trans_rmse: rmse(col(|t| t.trans_vs_svd)),
        }
    }

    /// Mean backward wall time per trial for IS and CIFT, in seconds.
    pub fn mean_seconds(&self) -> (f64, f64) {
        let n = self.trials.len().max(1) as f64;
        (
            self.trials.iter().map(|t| t.is_seconds).sum::<f64>() / n,
            self.trials.iter().map(|t| t.cift_seconds).sum::<f64>() / n,
        )
    }

    /// Per-trial table without timings, so equal seeds give equal bytes.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "trial",
            "tightness_ratio",
            "is_vs_cift",
            "is_vs_fd",
            "cift_vs_fd",
            "is_vs_svd",
            "cift_vs_svd",
            "rot_vs_svd",
            "trans_vs_svd",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for t in &self.trials {
            w.write_record([
                t.trial.to_string(),
                format!("{:e}", t.tightness_ratio),
                format!("{:e}", t.is_vs_cift),
                opt(t.is_vs_fd),
                opt(t.cift_vs_fd),
                opt(t.is_vs_svd),
                opt(t.cift_vs_svd),
                opt(t.rot_vs_svd),
                opt(t.trans_vs_svd),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

struct Backprop {
    is: DMatrix<f64>,
    cift: DMatrix<f64>,
    is_seconds: f64,
    cift_seconds: f64,
    x: DVector<f64>,
    ratio: f64,
}

fn both_jacobians<S>(layer: &Layer<f64>, q: &HomQcqp<f64>, n_params: usize, select: S) -> Result<Backprop, String>
where
    S: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let fwd = layer.forward(q).map_err(|e| e.to_string())?;
    let sel = select(&fwd.cert.x);
    let run = |method: BackpropMethod| {
        let start = Instant::now();
        let j =
            backprop_jacobian(&sel, |g| backprop(q, &fwd.cert, g, method, &layer.backprop), |r| r.chain(q, n_params))
                .map_err(|e| e.to_string())?;
        Ok::<_, String>((j, start.elapsed().as_secs_f64()))
    };
    let (is, is_seconds) = run(BackpropMethod::Is)?;
    let (cift, cift_seconds) = run(BackpropMethod::Cift)?;
    Ok(Backprop { is, cift, is_seconds, cift_seconds, ratio: fwd.cert.tightness_ratio, x: fwd.cert.x })
}

/// Central differences of `f` with steps `h·(1 + |θ_k|)`.
fn fd_of<F>(f: F, theta: &DVector<f64>, h: f64) -> Result<DMatrix<f64>, String>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, String>,
{
    let mut cols = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let step = h * (1.0 + theta[k].abs());
        let mut p = theta.clone();
        p[k] += step;
        let plus = f(&p)?;
        p[k] = theta[k] - step;
        let minus = f(&p)?;
        cols.push((plus - minus) / (2.0 * step));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// A random tight polynomial instance near the tabulated coefficients.
pub fn random_poly_theta<R: Rng + ?Sized>(rng: &mut R) -> [f64; 7] {
    let mut th = TABLE_COEFFS;
    for t in th.iter_mut() {
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        *t = *t * (1.0 + 0.05 * a) + 0.005 * b;
    }
    th
}

/// Jacobian of `x*` with respect to the seven coefficients on random
/// polynomial instances.
pub fn poly_jacobian_compare(trials: usize, seed: u64, fd_step: f64, layer: &Layer<f64>) -> JacobianReport {
    let results = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let fail = |message: String| TrialFailure { trial, message };
            let theta = random_poly_theta(&mut trial_rng(seed, trial));
            let q = poly_problem(&theta);
            let bp = both_jacobians(layer, &q, 7, |x| DMatrix::identity(x.len(), x.len())).map_err(fail)?;
            let th = DVector::from_column_slice(&theta);
            let to_q = |v: &DVector<f64>| {
                let arr: [f64; 7] = v.as_slice().try_into().expect("seven coefficients");
                poly_problem(&arr)
            };
            let fd = fd_jacobian_oracle(to_q, &th, fd_step, |q| layer.certified(q)).map_err(|e| fail(e.to_string()))?;
            Ok(JacobianTrial {
                trial,
                tightness_ratio: bp.ratio,
                is_vs_cift: rel_inf_norm_diff(&bp.is, &bp.cift),
                is_vs_fd: Some(rel_inf_norm_diff(&bp.is, &fd)),
                cift_vs_fd: Some(rel_inf_norm_diff(&bp.cift, &fd)),
                is_vs_svd: None,
                cift_vs_svd: None,
                rot_vs_svd: None,
                trans_vs_svd: None,
                is_seconds: bp.is_seconds,
                cift_seconds: bp.cift_seconds,
            })
        })
        .collect();
    JacobianReport::from_results(results)
}

/// A simulated localization instance for trial `trial`.
pub fn simulate_trial(cfg: &JacCompareConfig, trial: usize) -> Result<LocalizationInstance, String> {
    let mut rng = trial_rng(cfg.seed, trial);
    let pose = sample_pose(&cfg.sampling, &mut rng);
    let grid = landmark_grid(cfg.grid_side, cfg.grid_width);
    LocalizationInstance::simulate(&cfg.camera, pose, grid, cfg.weighting, &mut rng).map_err(|e| e.to_string())
}

fn stereo_trial(cfg: &JacCompareConfig, layer: &Layer<f64>, trial: usize) -> Result<JacobianTrial, String> {
    let inst = simulate_trial(cfg, trial)?;
    let n_params = 3 * inst.landmarks.len();
    let q = build_localization_qcqp(&inst, true, StereoParams::Landmarks).map_err(|e| e.to_string())?;
    let bp = both_jacobians(layer, &q, n_params, pose_output_jacobian)?;
    let theta = inst.flat_landmarks();
    let mut out = JacobianTrial {
        trial,
        tightness_ratio: bp.ratio,
        is_vs_cift: rel_inf_norm_diff(&bp.is, &bp.cift),
        is_vs_fd: None,
        cift_vs_fd: None,
        is_vs_svd: None,
        cift_vs_svd: None,
        rot_vs_svd: None,
        trans_vs_svd: None,
        is_seconds: bp.is_seconds,
        cift_seconds: bp.cift_seconds,
    };
    if cfg.fd_oracle {
        let to_q = |v: &DVector<f64>| {
            build_localization_qcqp(&inst.from_flat_landmarks(v), true, StereoParams::None)
                .expect("perturbed landmarks keep the instance valid")
        };
        let jx = fd_jacobian_oracle(to_q, &theta, cfg.fd_step, |q| layer.certified(q)).map_err(|e| e.to_string())?;
        let fd = pose_output_jacobian(&bp.x) * jx;
        out.is_vs_fd = Some(rel_inf_norm_diff(&bp.is, &fd));
        out.cift_vs_fd = Some(rel_inf_norm_diff(&bp.cift, &fd));
    }
    if cfg.weighting == Weighting::Scalar {
        let svd_pose = |v: &DVector<f64>| {
            umeyama_solve(&inst.from_flat_landmarks(v)).map(|p| pose_vector(&p)).map_err(|e| e.to_string())
        };
        let svd = fd_of(svd_pose, &theta, cfg.fd_step)?;
        out.is_vs_svd = Some(rel_inf_norm_diff(&bp.is, &svd));
        out.cift_vs_svd = Some(rel_inf_norm_diff(&bp.cift, &svd));
        let reference = umeyama_solve(&inst).map_err(|e| e.to_string())?;
        let (rot, trans) = pose_difference(&Pose::from_lifted(&bp.x), &reference);
        out.rot_vs_svd = Some(rot);
        out.trans_vs_svd = Some(trans);
    }
    Ok(out)
}

/// Jacobian of the estimated pose `(vec C, t)` with respect to the landmark
/// coordinates, one simulated instance per trial.
pub fn jacobian_compare(cfg: &JacCompareConfig, layer: &Layer<f64>) -> JacobianReport {
    let results = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| stereo_trial(cfg, layer, trial).map_err(|message| TrialFailure { trial, message }))
        .collect();
    JacobianReport::from_results(results)
}
