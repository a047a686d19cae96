//! Discovery of quadratic constraints that vanish on a feasible set, and a
//! loop that adds them until the relaxation becomes tight.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::certify::{CertifiedSolution, Verdict};
use crate::qcqp::{HomQcqp, ParamSymMatrix, QcqpError};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutotightError {
    #[error("need at least {required} samples, got {found}")]
    InsufficientSamples { required: usize, found: usize },
    #[error("sample has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid tolerance {0:e}")]
    InvalidTolerance(f64),
    #[error("solver failure in round {round}: {message}")]
    SolverFailure { round: usize, message: String },
    #[error(transparent)]
    Qcqp(#[from] QcqpError),
}

/// Draws feasible points of a fixed problem instance from integer seeds.
pub struct FeasibleSampler<T: Real> {
    dim: usize,
    draw: Box<dyn Fn(u64) -> DVector<T> + Send + Sync>,
}

impl<T: Real> FeasibleSampler<T> {
    pub fn new<F>(dim: usize, draw: F) -> Self
    where
        F: Fn(u64) -> DVector<T> + Send + Sync + 'static,
    {
        Self { dim, draw: Box::new(draw) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw(&self, seed: u64) -> DVector<T> {
        (self.draw)(seed)
    }
}

impl<T: Real> fmt::Debug for FeasibleSampler<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeasibleSampler").field("dim", &self.dim).finish_non_exhaustive()
    }
}

/// Length of the half-vectorization of an `n × n` symmetric matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Half-vectorization (upper triangle, row-major) with off-diagonals scaled by
/// √2, so that `⟨svec A, svec B⟩ = ⟨A, B⟩_F`.
pub fn svec<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    let n = a.nrows();
    let r2 = T::lit(std::f64::consts::SQRT_2);
    let mut out = DVector::zeros(svec_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { a[(i, i)] } else { a[(i, j)] * r2 };
            k += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat<T: Real>(v: &DVector<T>, n: usize) -> DMatrix<T> {
    let r2 = T::lit(std::f64::consts::SQRT_2);
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                out[(i, i)] = v[k];
            } else {
                out[(i, j)] = v[k] / r2;
                out[(j, i)] = v[k] / r2;
            }
            k += 1;
        }
    }
    out
}

/// A constraint matrix with unit Frobenius norm and its nullspace margin
/// `tol·σ_max − σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovered<T: Real> {
    pub matrix: DMatrix<T>,
    pub margin: T,
}

pub fn default_sample_count(n: usize) -> usize {
    3 * svec_len(n)
}

/// Orthonormal basis of `{A : x_sᵀ A x_s = 0 for every sample}`, ordered by
/// decreasing margin. Samples use seeds `seed_offset..seed_offset + sample_count`.
pub fn find_constraints<T: Real>(
    sampler: &FeasibleSampler<T>,
    sample_count: usize,
    tol: T,
    seed_offset: u64,
) -> Result<Vec<Discovered<T>>, AutotightError> {
    if !(tol > T::zero()) {
        return Err(AutotightError::InvalidTolerance(tol.to_f64_lossy()));
    }
    let n = sampler.dim();
    let d = svec_len(n);
    if sample_count < d {
        return Err(AutotightError::InsufficientSamples { required: d, found: sample_count });
    }
    let mut data = DMatrix::zeros(sample_count, d);
    for s in 0..sample_count {
        let x = sampler.draw(seed_offset + s as u64);
        if x.len() != n {
            return Err(AutotightError::DimensionMismatch { expected: n, found: x.len() });
        }
        data.set_row(s, &svec(&(&x * x.transpose())).transpose());
    }
    let svd = data.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma = &svd.singular_values;
    let smax = sigma.max();
    let threshold = tol * smax;
    let mut found: Vec<Discovered<T>> = (0..d)
        .filter(|&k| sigma[k] <= threshold)
        .map(|k| Discovered { matrix: smat(&v_t.row(k).transpose(), n), margin: threshold - sigma[k] })
        .collect();
    found.sort_by(|a, b| b.margin.partial_cmp(&a.margin).unwrap_or(std::cmp::Ordering::Equal));
    log::debug!("autotight: {} samples, nullspace dimension {}", sample_count, found.len());
    Ok(found)
}

/// Keeps the discovered directions that are not in the span of `existing`,
/// orthonormalized in order.
pub fn new_directions<T: Real>(existing: &[DMatrix<T>], discovered: &[Discovered<T>]) -> Vec<Discovered<T>> {
    let mut basis: Vec<DVector<T>> = Vec::new();
    for e in existing {
        let mut v = svec(e);
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let nv = v.norm();
        if nv > T::lit(1e-10) * (T::one() + svec(e).norm()) {
            basis.push(v / nv);
        }
    }
    let mut out = Vec::new();
    for disc in discovered {
        let mut v = svec(&disc.matrix);
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let nv = v.norm();
        if nv > T::lit(1e-6) {
            let v = v / nv;
            out.push(Discovered { matrix: smat(&v, disc.matrix.nrows()), margin: disc.margin });
            basis.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TightenOptions<T> {
    pub max_rounds: usize,
    /// `None` uses [`default_sample_count`].
    pub sample_count: Option<usize>,
    pub null_tol: T,
    pub seed_offset: u64,
}

impl<T: Real> Default for TightenOptions<T> {
    fn default() -> Self {
        Self { max_rounds: 20, sample_count: None, null_tol: T::lit(1e-8), seed_offset: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord<T> {
    pub round: usize,
    pub num_constraints: usize,
    pub tightness_ratio: T,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TightenOutcome {
    Tight {
        round: usize,
    },
    /// Every discovered constraint was added and the relaxation is still not tight.
    Exhausted,
    RoundLimit,
}

#[derive(Debug, Clone)]
pub struct TightenReport<T: Real> {
    pub rounds: Vec<RoundRecord<T>>,
    pub added: Vec<DMatrix<T>>,
    /// Number of independent candidate constraints the sampler revealed.
    pub discovered: usize,
    pub outcome: TightenOutcome,
}

impl<T: Real> TightenReport<T> {
    pub fn message(&self) -> String {
        match self.outcome {
            TightenOutcome::Tight { round } => {
                format!("tight after round {round}, {} constraints added", self.added.len())
            }
            TightenOutcome::Exhausted => "exhausted, raise lifting manually".to_string(),
            TightenOutcome::RoundLimit => format!("round limit reached with {} constraints added", self.added.len()),
        }
    }
}

/// Solves, and while the result is not certified tight appends one newly
/// discovered constraint per round, highest margin first.
pub fn tighten_loop<T, S, E>(
    q: &HomQcqp<T>,
    sampler: &FeasibleSampler<T>,
    opts: &TightenOptions<T>,
    mut solve: S,
) -> Result<(HomQcqp<T>, TightenReport<T>), AutotightError>
where
    T: Real,
    S: FnMut(&HomQcqp<T>) -> Result<CertifiedSolution<T>, E>,
    E: fmt::Display,
{
    if sampler.dim() != q.n() {
        return Err(AutotightError::DimensionMismatch { expected: q.n(), found: sampler.dim() });
    }
    let mut current = q.clone();
    let mut rounds = Vec::new();
    let mut added = Vec::new();
    let mut pending: Option<Vec<Discovered<T>>> = None;
    let mut discovered = 0;
    for round in 0..=opts.max_rounds {
        let cert = solve(&current).map_err(|e| AutotightError::SolverFailure { round, message: e.to_string() })?;
        rounds.push(RoundRecord {
            round,
            num_constraints: current.m(),
            tightness_ratio: cert.tightness_ratio,
            verdict: cert.verdict,
        });
        log::info!(
            "autotight round {round}: {} constraints, ratio {:.3e}, {:?}",
            current.m(),
            cert.tightness_ratio.to_f64_lossy(),
            cert.verdict
        );
        if cert.verdict == Verdict::TightCertified {
            let report = TightenReport { rounds, added, discovered, outcome: TightenOutcome::Tight { round } };
            return Ok((current, report));
        }
        if round == opts.max_rounds {
            break;
        }
        if pending.is_none() {
            let count = opts.sample_count.unwrap_or_else(|| default_sample_count(q.n()));
            let found = find_constraints(sampler, count, opts.null_tol, opts.seed_offset)?;
            let fresh = new_directions(current.a_all(), &found);
            discovered = fresh.len();
            pending = Some(fresh.into_iter().rev().collect());
        }
        let Some(next) = pending.as_mut().and_then(Vec::pop) else {
            let report = TightenReport { rounds, added, discovered, outcome: TightenOutcome::Exhausted };
            return Ok((current, report));
        };
        current = current.with_extra_constraints(vec![ParamSymMatrix::from_dense(&next.matrix)?])?;
        added.push(next.matrix);
    }
    let report = TightenReport { rounds, added, discovered, outcome: TightenOutcome::RoundLimit };
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poly_sampler() -> FeasibleSampler<f64> {
        FeasibleSampler::new(4, |seed| {
            let t: f64 = ChaCha8Rng::seed_from_u64(seed).random_range(-2.0..2.0);
            DVector::from_vec(vec![1.0, t, t * t, t * t * t])
        })
    }

    fn poly_constraints() -> Vec<DMatrix<f64>> {
        [vec![(0, 2, 0.5), (1, 1, -1.0)], vec![(0, 3, 1.0), (1, 2, -1.0)], vec![(1, 3, 0.5), (2, 2, -1.0)]]
            .iter()
            .map(|t| ParamSymMatrix::new(4, t).unwrap().to_dense())
            .collect()
    }

    fn span_residual(a: &DMatrix<f64>, basis: &[Discovered<f64>]) -> f64 {
        let v = svec(a);
        let mut r = v.clone();
        for b in basis {
            let bv = svec(&b.matrix);
            r -= &bv * bv.dot(&v);
        }
        r.norm() / v.norm()
    }

    #[test]
    fn svec_preserves_frobenius_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            let b = DMatrix::<f64>::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            (&b + b.transpose()) * 0.5
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        assert!((svec(&a).dot(&svec(&b)) - a.dot(&b)).abs() <= 1e-12);
        assert!((smat(&svec(&a), 5) - &a).amax() <= 1e-15);
    }

    #[test]
    fn polynomial_lifting_has_three_constraints() {
        let found = find_constraints(&poly_sampler(), default_sample_count(4), 1e-8, 0).unwrap();
        assert_eq!(found.len(), 3);
        for a in poly_constraints() {
            assert!(span_residual(&a, &found) <= 1e-8);
        }
        for s in 0..100 {
            let x = poly_sampler().draw(10_000 + s);
            for d in &found {
                assert!(x.dot(&(&d.matrix * &x)).abs() <= 1e-9 * d.matrix.norm() * x.norm_squared());
            }
        }
    }

    #[test]
    fn homogeneous_only_has_no_constraints() {
        let s = FeasibleSampler::new(1, |_| DVector::from_vec(vec![1.0]));
        assert!(find_constraints(&s, 3, 1e-8, 0).unwrap().is_empty());
    }

    #[test]
    fn too_few_samples_rejected() {
        let err = find_constraints(&poly_sampler(), 9, 1e-8, 0).unwrap_err();
        assert_eq!(err, AutotightError::InsufficientSamples { required: 10, found: 9 });
    }

    #[test]
    fn rotation_lifting_contains_orthonormality() {
        let sampler = FeasibleSampler::new(13, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let qr = a.qr();
            let mut c = qr.q();
            if c.determinant() < 0.0 {
                let col = -c.column(0);
                c.set_column(0, &col);
            }
            let mut x = DVector::zeros(13);
            x[0] = 1.0;
            x.rows_mut(1, 9).copy_from_slice(c.as_slice());
            for k in 0..3 {
                x[10 + k] = rng.random_range(-3.0..3.0);
            }
            x
        });
        let n = 13;
        let found = find_constraints(&sampler, 2 * n * n, 1e-8, 0).unwrap();
        // vec(C) occupies entries 1..10, column-major.
        let idx = |row: usize, col: usize| 1 + row + 3 * col;
        let mut known = Vec::new();
        for i in 0..3 {
            for j in i..3 {
                let mut cols = DMatrix::zeros(n, n);
                let mut rows = DMatrix::zeros(n, n);
                for k in 0..3 {
                    cols[(idx(k, i), idx(k, j))] += 0.5;
                    cols[(idx(k, j), idx(k, i))] += 0.5;
                    rows[(idx(i, k), idx(j, k))] += 0.5;
                    rows[(idx(j, k), idx(i, k))] += 0.5;
                }
                if i == j {
                    cols[(0, 0)] = -1.0;
                    rows[(0, 0)] = -1.0;
                }
                known.push(cols);
                known.push(rows);
            }
        }
        for a in &known {
            assert!(span_residual(a, &found) <= 1e-8);
        }
        // Rank oracle: the nullspace dimension equals svec_len minus data rank.
        let mut data = DMatrix::zeros(2 * n * n, svec_len(n));
        for s in 0..2 * n * n {
            let x = sampler.draw(s as u64);
            data.set_row(s, &svec(&(&x * x.transpose())).transpose());
        }
        let sv = data.singular_values();
        let rank = sv.iter().filter(|&&v| v > 1e-8 * sv.max()).count();
        assert_eq!(found.len(), svec_len(n) - rank);
    }

    #[test]
    fn new_directions_skips_known_constraints() {
        let found = find_constraints(&poly_sampler(), 30, 1e-8, 0).unwrap();
        let known = poly_constraints();
        assert!(new_directions(&known, &found).is_empty());
        let fresh = new_directions(&known[..1], &found);
        assert_eq!(fresh.len(), 2);
        for f in &fresh {
            assert!(svec(&f.matrix).dot(&svec(&known[0])).abs() <= 1e-10);
        }
    }

    #[test]
    fn report_message_for_exhaustion() {
        let r =
            TightenReport::<f64> { rounds: vec![], added: vec![], discovered: 0, outcome: TightenOutcome::Exhausted };
        assert_eq!(r.message(), "exhausted, raise lifting manually");
    }
}
