//! Tightness audits: start from a relaxation missing redundant constraints and
//! let constraint discovery restore tightness.

use certigrad::autotight::{tighten_loop, FeasibleSampler, TightenOptions, TightenOutcome};
use certigrad::certify::Verdict;
use certigrad::pipeline::Layer;
use certigrad::qcqp::{build_hom_qcqp, HomQcqp};
use nalgebra::{DVector, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::jacobian::{simulate_trial, JacCompareConfig};
use crate::poly::{lift, lifting_constraints, poly_problem, TABLE_COEFFS};
use crate::stereo::{build_localization_qcqp, Pose, StereoParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRound {
    pub round: usize,
    pub num_constraints: usize,
    pub tightness_ratio: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditCase {
    pub name: String,
    pub initial_verdict: String,
    pub initial_ratio: f64,
    /// Independent constraints found by sampling that were not already present.
    pub discovered: usize,
    pub added: usize,
    /// Round at which the relaxation became tight, if it did.
    pub tight_round: Option<usize>,
    pub final_ratio: f64,
    pub message: String,
    pub rounds: Vec<AuditRound>,
    /// Each added constraint as upper-triangle `(row, col, value)` entries.
    pub added_constraints: Vec<Vec<(usize, usize, f64)>>,
}

/// The polynomial problem keeping only the first two lifting constraints.
pub fn stripped_polynomial() -> HomQcqp<f64> {
    let cost = poly_problem(&TABLE_COEFFS).cost().clone();
    build_hom_qcqp(cost, lifting_constraints()[..2].to_vec(), 0).expect("valid stripped problem")
}

pub fn polynomial_sampler() -> FeasibleSampler<f64> {
    FeasibleSampler::new(4, |seed| lift(ChaCha8Rng::seed_from_u64(seed).random_range(-2.0..2.0)))
}

/// Uniform rotations and Gaussian translations, lifted to `(1, vec C, C t)`.
pub fn pose_sampler() -> FeasibleSampler<f64> {
    FeasibleSampler::new(13, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let q = UnitQuaternion::from_quaternion(Quaternion::new(g(), g(), g(), g()));
        let t = Vector3::new(g(), g(), g()) * 3.0;
        Pose { c: *q.to_rotation_matrix().matrix(), t }.lift()
    })
}

fn sparse_entries(m: &nalgebra::DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for c in 0..m.ncols() {
        for r in 0..=c {
            if m[(r, c)].abs() > 1e-12 {
                out.push((r, c, m[(r, c)]));
            }
        }
    }
    out
}

pub fn audit(
    name: &str,
    q: &HomQcqp<f64>,
    sampler: &FeasibleSampler<f64>,
    layer: &Layer<f64>,
) -> Result<AuditCase, String> {
    let (_, report) =
        tighten_loop(q, sampler, &TightenOptions::default(), |q| layer.certified(q)).map_err(|e| e.to_string())?;
    let verdict = |v: Verdict| format!("{v:?}");
    let first = report.rounds.first().ok_or("tighten loop ran no rounds")?;
    let last = report.rounds.last().ok_or("tighten loop ran no rounds")?;
    Ok(AuditCase {
        name: name.to_string(),
        initial_verdict: verdict(first.verdict),
        initial_ratio: first.tightness_ratio,
        discovered: report.discovered,
        added: report.added.len(),
        tight_round: match report.outcome {
            TightenOutcome::Tight { round } => Some(round),
            _ => None,
        },
        final_ratio: last.tightness_ratio,
        message: report.message(),
        rounds: report
            .rounds
            .iter()
            .map(|r| AuditRound {
                round: r.round,
                num_constraints: r.num_constraints,
                tightness_ratio: r.tightness_ratio,
                verdict: verdict(r.verdict),
            })
            .collect(),
        added_constraints: report.added.iter().map(sparse_entries).collect(),
    })
}

/// Audits the stripped polynomial and a stereo instance with only the
/// column-orthonormality constraints.
pub fn tightness_audit(seed: u64, layer: &Layer<f64>) -> Vec<Result<AuditCase, String>> {
    let poly = audit("polynomial-stripped", &stripped_polynomial(), &polynomial_sampler(), layer);
    let cfg = JacCompareConfig { seed, ..Default::default() };
    let stereo = simulate_trial(&cfg, 0).and_then(|inst| {
        let q = build_localization_qcqp(&inst, false, StereoParams::None).map_err(|e| e.to_string())?;
        audit("stereo-no-redundant", &q, &pose_sampler(), layer)
    });
    vec![poly, stereo]
}

/// Quick check that a sampler's points are feasible for `q`.
pub fn max_residual(q: &HomQcqp<f64>, sampler: &FeasibleSampler<f64>, draws: u64) -> f64 {
    (0..draws)
        .map(|s| {
            let x: DVector<f64> = sampler.draw(s);
            q.eval_objective_and_residuals(&x).map(|(_, r)| r.amax()).unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samplers_are_feasible() {
        assert!(max_residual(&stripped_polynomial(), &polynomial_sampler(), 20) < 1e-12);
        let inst = simulate_trial(&JacCompareConfig::default(), 0).unwrap();
        let q = build_localization_qcqp(&inst, true, StereoParams::None).unwrap();
        assert!(max_residual(&q, &pose_sampler(), 20) < 1e-12);
    }

    #[test]
    fn audit_restores_both_cases() {
        for case in tightness_audit(0, &Layer::default()) {
            let case = case.unwrap();
            assert_eq!(case.initial_verdict, "NotTight", "{}", case.name);
            assert!(case.tight_round.is_some(), "{}: {}", case.name, case.message);
            assert!(case.final_ratio > 1e5);
            assert_eq!(case.added_constraints.len(), case.added);
        }
    }
}
