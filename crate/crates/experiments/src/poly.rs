//! Bilevel tuning of a sextic so that its global minimum lands on a target.

use certigrad::certify::Verdict;
use certigrad::pipeline::Layer;
use certigrad::qcqp::{build_hom_qcqp, HomQcqp, ParamSymMatrix};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::trace::{BilevelTrace, TraceRecord};

pub const TABLE_COEFFS: [f64; 7] = [10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389];
pub const TARGET: (f64, f64) = (1.7, 7.3);

/// Where each coefficient enters `Q_θ` (upper triangle, weight per unit θ).
const PATTERN: [&[(usize, usize, f64)]; 7] = [
    &[(0, 0, 1.0)],
    &[(0, 1, 0.5)],
    &[(0, 2, 1.0 / 3.0), (1, 1, 1.0 / 3.0)],
    &[(0, 3, 0.25), (1, 2, 0.25)],
    &[(1, 3, 1.0 / 3.0), (2, 2, 1.0 / 3.0)],
    &[(2, 3, 0.5)],
    &[(3, 3, 1.0)],
];

/// Monomial lifting `x = (1, t, t², t³)` with `Q_θ` such that `xᵀQ_θx = Σ θ_i tⁱ`.
pub fn poly_problem(theta: &[f64; 7]) -> HomQcqp<f64> {
    let mut trip = Vec::new();
    for (k, pat) in PATTERN.iter().enumerate() {
        for &(r, c, w) in *pat {
            trip.push((r, c, w * theta[k]));
        }
    }
    let sens = PATTERN.iter().map(|p| p.to_vec()).collect();
    let cost =
        ParamSymMatrix::new(4, &trip).and_then(|c| c.with_sensitivity(sens)).expect("pattern indices are in range");
    build_hom_qcqp(cost, lifting_constraints(), 0).expect("fixed 4×4 layout")
}

pub fn lifting_constraints() -> Vec<ParamSymMatrix<f64>> {
    [[(0, 2, 0.5), (1, 1, -1.0)], [(0, 3, 1.0), (1, 2, -1.0)], [(1, 3, 0.5), (2, 2, -1.0)]]
        .iter()
        .map(|t| ParamSymMatrix::new(4, t).expect("indices in range"))
        .collect()
}

pub fn lift(t: f64) -> DVector<f64> {
    DVector::from_vec(vec![1.0, t, t * t, t * t * t])
}

pub fn poly_eval(theta: &[f64; 7], t: f64) -> f64 {
    theta.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

pub fn poly_deriv(theta: &[f64; 7], t: f64) -> f64 {
    (1..7).rev().fold(0.0, |acc, i| acc * t + i as f64 * theta[i])
}

fn poly_second(theta: &[f64; 7], t: f64) -> f64 {
    (2..7).rev().fold(0.0, |acc, i| acc * t + (i * (i - 1)) as f64 * theta[i])
}

/// Global minimizer by dense grid search over a Cauchy bound on the critical
/// points, refined by Newton on the derivative. Requires `θ_6 > 0`.
pub fn global_minimum(theta: &[f64; 7]) -> (f64, f64) {
    let lead = 6.0 * theta[6];
    let bound = 1.0 + (1..6).map(|i| (i as f64 * theta[i] / lead).abs()).fold(0.0, f64::max);
    let steps = 200_000;
    let mut best = (-bound, poly_eval(theta, -bound));
    for s in 1..=steps {
        let t = -bound + 2.0 * bound * s as f64 / steps as f64;
        let v = poly_eval(theta, t);
        if v < best.1 {
            best = (t, v);
        }
    }
    let mut t = best.0;
    for _ in 0..50 {
        let h = poly_second(theta, t);
        if h <= 0.0 {
            break;
        }
        let step = poly_deriv(theta, t) / h;
        t -= step;
        if step.abs() <= 1e-15 * (1.0 + t.abs()) {
            break;
        }
    }
    let v = poly_eval(theta, t);
    if v <= best.1 {
        (t, v)
    } else {
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolyBilevelConfig {
    pub theta0: [f64; 7],
    pub target: (f64, f64),
    pub lr: f64,
    pub loss_tol: f64,
    pub max_outer: usize,
    /// A change in `x*` larger than this between iterations counts as a basin jump.
    pub jump_threshold: f64,
}

impl Default for PolyBilevelConfig {
    fn default() -> Self {
        Self { theta0: TABLE_COEFFS, target: TARGET, lr: 1e-3, loss_tol: 1e-4, max_outer: 50_000, jump_threshold: 0.5 }
    }
}

/// Loss `(x* − x̄)² + (y(x*) − ȳ)²` and its gradient in `θ`, with `x*` from
/// the certified relaxation.
pub fn poly_loss_and_grad(
    layer: &Layer<f64>,
    theta: &[f64; 7],
    target: (f64, f64),
) -> Result<(f64, DVector<f64>, f64, f64), String> {
    let q = poly_problem(theta);
    let fwd = layer.forward(&q).map_err(|e| e.to_string())?;
    let t = fwd.cert.x[1];
    let y = poly_eval(theta, t);
    let (ex, ey) = (t - target.0, y - target.1);
    let loss = ex * ex + ey * ey;
    let mut incoming = DVector::zeros(4);
    incoming[1] = 2.0 * ex + 2.0 * ey * poly_deriv(theta, t);
    let report = layer.backward(&q, &fwd.cert, &incoming).map_err(|e| e.to_string())?;
    let mut grad = report.chain(&q, 7).map_err(|e| e.to_string())?;
    let mut tp = 1.0;
    for g in grad.iter_mut() {
        *g += 2.0 * ey * tp;
        tp *= t;
    }
    Ok((loss, grad, t, fwd.cert.tightness_ratio))
}

pub fn poly_bilevel(cfg: &PolyBilevelConfig, layer: &Layer<f64>) -> BilevelTrace {
    let mut theta = cfg.theta0;
    let mut trace = BilevelTrace::default();
    let mut prev_x: Option<f64> = None;
    for it in 0..=cfg.max_outer {
        let (loss, grad, x, ratio) = match poly_loss_and_grad(layer, &theta, cfg.target) {
            Ok(v) => v,
            Err(e) => {
                trace.abort = Some(format!("iteration {it}: {e}"));
                return trace;
            }
        };
        if let Some(p) = prev_x {
            if (x - p).abs() > cfg.jump_threshold {
                trace.jumps.push(it);
            }
        }
        prev_x = Some(x);
        trace.records.push(TraceRecord {
            iteration: it,
            loss,
            grad_norm: grad.norm(),
            tightness_ratio: ratio,
            params: theta.to_vec(),
            solution: vec![x, poly_eval(&theta, x)],
        });
        log::debug!("poly-bilevel it={it} loss={loss:.3e} x*={x:.6}");
        if loss < cfg.loss_tol {
            trace.converged = true;
            return trace;
        }
        if it == cfg.max_outer {
            break;
        }
        for (t, g) in theta.iter_mut().zip(grad.iter()) {
            *t -= cfg.lr * g;
        }
    }
    trace
}

/// `true` when the certified relaxation at `θ` is tight.
pub fn is_tight(layer: &Layer<f64>, theta: &[f64; 7]) -> bool {
    matches!(layer.solve(&poly_problem(theta)), Ok(f) if f.cert.verdict == Verdict::TightCertified)
}
