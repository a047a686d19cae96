//! Stereo baseline calibration by gradient descent through the localization layer.

use certigrad::pipeline::Layer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stereo::{
    build_localization_qcqp, landmark_grid, pose_loss, pose_loss_grad, sample_pose, CameraModel, LocalizationInstance,
    Pose, PoseSampling, StereoParams, Weighting,
};
use crate::trace::{BilevelTrace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub trials: usize,
    /// Poses per trial; the outer loss sums over all of them.
    pub poses: usize,
    /// Magnitude of the initial baseline error, with a random sign per trial.
    pub b_init_error: f64,
    pub lr: f64,
    pub grad_tol: f64,
    pub max_outer: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub grid_side: usize,
    pub grid_width: f64,
    /// Ground-truth camera; `camera.b` is the value being recovered.
    pub camera: CameraModel,
    pub sampling: PoseSampling,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            poses: 20,
            b_init_error: 0.003,
            lr: 1e-4,
            grad_tol: 1e-3,
            max_outer: 150,
            seed: 0,
            weighting: Weighting::Matrix,
            grid_side: 8,
            grid_width: 1.0,
            camera: CameraModel::default(),
            sampling: PoseSampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTrial {
    pub trial: usize,
    pub b_init: f64,
    pub b_final: f64,
    /// `|b_final − camera.b|`.
    pub final_error: f64,
    pub trace: BilevelTrace,
}

/// Summed pose loss over the instances and its derivative in `b`.
pub fn baseline_loss_and_grad(
    layer: &Layer<f64>,
    instances: &[LocalizationInstance],
    b: f64,
) -> Result<(f64, f64, f64), String> {
    let mut loss = 0.0;
    let mut grad = 0.0;
    let mut min_ratio = f64::INFINITY;
    for inst in instances {
        let scaled = inst.with_baseline(b);
        let q = build_localization_qcqp(&scaled, true, StereoParams::Baseline).map_err(|e| e.to_string())?;
        let gt = inst.ground_truth;
        let (fwd, g) = layer.value_and_grad(&q, 1, |x| pose_loss_grad(x, &gt)).map_err(|e| e.to_string())?;
        loss += pose_loss(&Pose::from_lifted(&fwd.cert.x), &gt);
        grad += g[0];
        min_ratio = min_ratio.min(fwd.cert.tightness_ratio);
    }
    Ok((loss, grad, min_ratio))
}

/// Gradient descent on `b` from `b_init` until `|dℓ/db| < grad_tol` or
/// `max_outer` updates. An inner failure ends the trace with `abort` set.
pub fn descend_baseline(
    layer: &Layer<f64>,
    instances: &[LocalizationInstance],
    b_init: f64,
    lr: f64,
    grad_tol: f64,
    max_outer: usize,
) -> BilevelTrace {
    let mut trace = BilevelTrace::default();
    let mut b = b_init;
    for it in 0..=max_outer {
        let (loss, grad, ratio) = match baseline_loss_and_grad(layer, instances, b) {
            Ok(v) => v,
            Err(e) => {
                trace.abort = Some(format!("iteration {it}: {e}"));
                return trace;
            }
        };
        trace.records.push(TraceRecord {
            iteration: it,
            loss,
            grad_norm: grad.abs(),
            tightness_ratio: ratio,
            params: vec![b],
            solution: vec![],
        });
        log::debug!("calibration it={it} b={b:.9} loss={loss:.3e} grad={grad:.3e}");
        if grad.abs() < grad_tol {
            trace.converged = true;
            return trace;
        }
        if it == max_outer {
            break;
        }
        b -= lr * grad;
    }
    trace
}

/// The poses of one trial, measured with the true baseline.
pub fn simulate_poses(cfg: &CalibrationConfig, rng: &mut ChaCha8Rng) -> Result<Vec<LocalizationInstance>, String> {
    let grid = landmark_grid(cfg.grid_side, cfg.grid_width);
    (0..cfg.poses)
        .map(|_| {
            let pose = sample_pose(&cfg.sampling, rng);
            LocalizationInstance::simulate(&cfg.camera, pose, grid.clone(), cfg.weighting, rng)
                .map_err(|e| e.to_string())
        })
        .collect()
}

pub fn calibration_trial(
    cfg: &CalibrationConfig,
    layer: &Layer<f64>,
    trial: usize,
) -> Result<CalibrationTrial, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let instances = simulate_poses(cfg, &mut rng)?;
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let b_init = cfg.camera.b + sign * cfg.b_init_error;
    let trace = descend_baseline(layer, &instances, b_init, cfg.lr, cfg.grad_tol, cfg.max_outer);
    if let Some(msg) = &trace.abort {
        return Err(msg.clone());
    }
    let b_final = trace.final_params().map_or(b_init, |p| p[0]);
    Ok(CalibrationTrial { trial, b_init, b_final, final_error: (b_final - cfg.camera.b).abs(), trace })
}

/// Runs every trial; failures are kept per trial.
pub fn calibrate_baseline(cfg: &CalibrationConfig, layer: &Layer<f64>) -> Vec<Result<CalibrationTrial, String>> {
    (0..cfg.trials).into_par_iter().map(|t| calibration_trial(cfg, layer, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pose(noise: bool) -> (CalibrationConfig, Vec<LocalizationInstance>) {
        let camera = if noise { CameraModel::default() } else { CameraModel::default().noiseless() };
        let cfg = CalibrationConfig { poses: 1, camera, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inst = simulate_poses(&cfg, &mut rng).unwrap();
        (cfg, inst)
    }

    #[test]
    fn exact_baseline_stops_immediately() {
        let (cfg, inst) = single_pose(false);
        let trace = descend_baseline(&Layer::default(), &inst, cfg.camera.b, cfg.lr, cfg.grad_tol, cfg.max_outer);
        assert!(trace.converged);
        assert_eq!(trace.records.len(), 1);
        assert!(trace.records[0].grad_norm < 1e-6);
    }

    #[test]
    fn gradient_points_toward_true_baseline() {
        let (cfg, inst) = single_pose(false);
        for db in [-0.003, 0.003] {
            let (_, g, _) = baseline_loss_and_grad(&Layer::default(), &inst, cfg.camera.b + db).unwrap();
            assert!(g * db > 0.0, "db {db}: grad {g}");
        }
    }

    #[test]
    fn noiseless_single_pose_converges() {
        let (cfg, inst) = single_pose(false);
        let trace = descend_baseline(&Layer::default(), &inst, cfg.camera.b + 0.003, 2e-3, 1e-4, 300);
        let b = trace.final_params().unwrap()[0];
        assert!((b - cfg.camera.b).abs() < 1e-5, "b = {b}");
        let tail: Vec<f64> = trace.records.iter().rev().take(5).map(|r| (r.params[0] - cfg.camera.b).abs()).collect();
        assert!(tail.windows(2).all(|w| w[0] <= w[1]), "{tail:?}");
    }

    #[test]
    fn trial_is_deterministic() {
        let cfg = CalibrationConfig { poses: 2, max_outer: 3, seed: 4, ..Default::default() };
        let a = calibration_trial(&cfg, &Layer::default(), 1).unwrap();
        let b = calibration_trial(&cfg, &Layer::default(), 1).unwrap();
        assert_eq!(a, b);
        assert!((a.b_init - cfg.camera.b).abs() - cfg.b_init_error < 1e-15);
    }
}
