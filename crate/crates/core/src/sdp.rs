//! Shor relaxation and a dense primal-dual interior-point SDP solver.
//!
//! Standard form used internally:
//!
//! ```text
//! primal:  min ⟨C, X⟩  s.t.  ⟨A_i, X⟩ = b_i,  X ⪰ 0
//! dual:    max bᵀy     s.t.  S = C − Σ y_i A_i ⪰ 0
//! ```
//!
//! For a Shor relaxation the QCQP multipliers are `λ = −y`, so that the dual
//! slack `S` is exactly the certificate matrix `H = Q + Σ λ_i A_i + λ_0 A_0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qcqp::HomQcqp;
use crate::scalar::Real;
use crate::symlin::{frob_dot, select_independent_rows, sym_eigenvalues, symmetrize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix {0} is not square")]
    NotSquare(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

/// Absolute residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpResiduals<T> {
    /// `max(‖A(X) − b‖₂, max(0, −λ_min(X)))`.
    pub primal_infeas: T,
    /// `max(0, −λ_min(S))` with `S` recomputed from the multipliers.
    pub dual_infeas: T,
    /// `⟨C, X⟩ − bᵀy`.
    pub gap: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Threshold for dropping linearly dependent equality constraints.
    pub dependency_tol: T,
    /// Refine numerically rank-1 Shor solutions on the QCQP KKT system.
    pub polish: bool,
}

impl<T: Real> Default for SdpOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-10), max_iter: 100, dependency_tol: T::lit(1e-10), polish: true }
    }
}

impl<T: Real> SdpOptions<T> {
    pub fn with_tol(tol: T) -> Self {
        Self { tol, ..Self::default() }
    }

    /// Tolerance used to classify a result as optimal. Never tighter than 1e-9
    /// so that a solve at `tol = 1e-10` and a re-check of the same point agree.
    pub fn status_tol(&self) -> T {
        self.tol.max(T::lit(STATUS_TOL))
    }
}

const STATUS_TOL: f64 = 1e-9;
const STEP_FRACTION: f64 = 0.98;
const DIVERGENCE_NORM: f64 = 1e12;
const STALL_LIMIT: usize = 8;
const POLISH_RATIO: f64 = 1e4;
const POLISH_MAX_ITER: usize = 30;

/// A dense standard-form SDP.
#[derive(Debug, Clone)]
pub struct Sdp<T: Real> {
    c: DMatrix<T>,
    a: Vec<DMatrix<T>>,
    b: DVector<T>,
}

impl<T: Real> Sdp<T> {
    /// Validates shapes and symmetrizes every matrix.
    pub fn new(c: DMatrix<T>, a: Vec<DMatrix<T>>, b: DVector<T>) -> Result<Self, SdpError> {
        if !c.is_square() {
            return Err(SdpError::NotSquare("C"));
        }
        let n = c.nrows();
        for ai in &a {
            if !ai.is_square() {
                return Err(SdpError::NotSquare("A_i"));
            }
            if ai.nrows() != n {
                return Err(SdpError::DimensionMismatch { expected: n, found: ai.nrows() });
            }
        }
        if b.len() != a.len() {
            return Err(SdpError::DimensionMismatch { expected: a.len(), found: b.len() });
        }
        Ok(Self { c: symmetrize(&c), a: a.iter().map(symmetrize).collect(), b })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }

    pub fn a(&self) -> &[DMatrix<T>] {
        &self.a
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    /// `A(X) = (⟨A_1, X⟩, …, ⟨A_m, X⟩)`.
    pub fn apply_a(&self, x: &DMatrix<T>) -> DVector<T> {
        apply_a(&self.a, x)
    }

    /// `Aᵀ(y) = Σ y_i A_i`.
    pub fn apply_at(&self, y: &DVector<T>) -> DMatrix<T> {
        apply_at(&self.a, y, self.n())
    }

    /// Dual slack `C − Aᵀ(y)`.
    pub fn slack(&self, y: &DVector<T>) -> DMatrix<T> {
        &self.c - self.apply_at(y)
    }

    /// Residuals of `(X, y)`, with the slack recomputed from `y`.
    pub fn residuals(&self, x: &DMatrix<T>, y: &DVector<T>) -> Result<SdpResiduals<T>, SdpError> {
        let n = self.n();
        if x.nrows() != n || x.ncols() != n {
            return Err(SdpError::DimensionMismatch { expected: n, found: x.nrows() });
        }
        if y.len() != self.m() {
            return Err(SdpError::DimensionMismatch { expected: self.m(), found: y.len() });
        }
        let xs = symmetrize(x);
        let lin = (self.apply_a(&xs) - &self.b).norm();
        let psd = neg_part(min_eig(&xs));
        let s = self.slack(y);
        Ok(SdpResiduals {
            primal_infeas: lin.max(psd),
            dual_infeas: neg_part(min_eig(&s)),
            gap: frob_dot(&self.c, &xs) - self.b.dot(y),
        })
    }

    /// Whether residuals meet the optimality thresholds at `status_tol`.
    pub fn meets_thresholds(&self, x: &DMatrix<T>, r: &SdpResiduals<T>, status_tol: T) -> bool {
        let one = T::one();
        let pobj = frob_dot(&self.c, x);
        r.primal_infeas <= status_tol * (one + self.b.norm())
            && r.dual_infeas <= status_tol * (one + self.c.norm())
            && r.gap.abs() <= status_tol * (one + pobj.abs())
    }
}

fn neg_part<T: Real>(v: T) -> T {
    (-v).max(T::zero())
}

fn min_eig<T: Real>(s: &DMatrix<T>) -> T {
    if s.nrows() == 0 {
        return T::zero();
    }
    sym_eigenvalues(s).iter().fold(T::max_value().unwrap(), |m, &v| m.min(v))
}

fn apply_a<T: Real>(a: &[DMatrix<T>], x: &DMatrix<T>) -> DVector<T> {
    DVector::from_iterator(a.len(), a.iter().map(|ai| frob_dot(ai, x)))
}

fn apply_at<T: Real>(a: &[DMatrix<T>], y: &DVector<T>, n: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(n, n);
    for (ai, &yi) in a.iter().zip(y.iter()) {
        out += ai * yi;
    }
    out
}

/// Constraint matrices with a sparse copy of each one that has few nonzeros.
struct Constraints<'a, T: Real> {
    dense: &'a [DMatrix<T>],
    sparse: Vec<Option<Vec<(usize, usize, T)>>>,
}

impl<'a, T: Real> Constraints<'a, T> {
    fn new(dense: &'a [DMatrix<T>]) -> Self {
        let sparse = dense
            .iter()
            .map(|a| {
                let n = a.nrows();
                let nz: Vec<(usize, usize, T)> = (0..n)
                    .flat_map(|j| (0..n).map(move |i| (i, j)))
                    .filter(|&(i, j)| a[(i, j)] != T::zero())
                    .map(|(i, j)| (i, j, a[(i, j)]))
                    .collect();
                (nz.len() <= 4 * n).then_some(nz)
            })
            .collect();
        Self { dense, sparse }
    }

    fn len(&self) -> usize {
        self.dense.len()
    }

    fn dot(&self, i: usize, x: &DMatrix<T>) -> T {
        match &self.sparse[i] {
            Some(nz) => nz.iter().fold(T::zero(), |acc, &(r, c, v)| acc + v * x[(r, c)]),
            None => frob_dot(&self.dense[i], x),
        }
    }

    fn apply(&self, x: &DMatrix<T>) -> DVector<T> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|i| self.dot(i, x)))
    }

    fn apply_t(&self, y: &DVector<T>, n: usize) -> DMatrix<T> {
        let mut out = DMatrix::zeros(n, n);
        for (i, &yi) in y.iter().enumerate() {
            match &self.sparse[i] {
                Some(nz) => nz.iter().for_each(|&(r, c, v)| out[(r, c)] += v * yi),
                None => out += &self.dense[i] * yi,
            }
        }
        out
    }

    /// `M_ij = ⟨A_i, W A_j W⟩`.
    fn schur(&self, w: &DMatrix<T>) -> DMatrix<T> {
        let m = self.len();
        let waw: Vec<Option<DMatrix<T>>> =
            (0..m).map(|j| self.sparse[j].is_none().then(|| w * &self.dense[j] * w)).collect();
        let mut out = DMatrix::zeros(m, m);
        for j in 0..m {
            for i in 0..=j {
                let v = match (&self.sparse[i], &self.sparse[j], &waw[j], &waw[i]) {
                    (Some(si), Some(sj), _, _) => si.iter().fold(T::zero(), |acc, &(r, s, a)| {
                        sj.iter().fold(acc, |acc, &(p, q, b)| acc + a * b * w[(r, p)] * w[(q, s)])
                    }),
                    (_, _, Some(wj), _) => self.dot(i, wj),
                    (_, _, None, Some(wi)) => self.dot(j, wi),
                    _ => unreachable!("a dense matrix always has its product cached"),
                };
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Raw output of [`solve_standard`].
#[derive(Debug, Clone)]
pub struct SdpSolution<T: Real> {
    pub x: DMatrix<T>,
    pub y: DVector<T>,
    /// Slack recomputed as `C − Aᵀ(y)`.
    pub s: DMatrix<T>,
    pub status: SdpStatus,
    pub residuals: SdpResiduals<T>,
    pub iterations: usize,
    /// Constraint rows removed as linearly dependent; their `y` entries are 0.
    pub dropped_rows: Vec<usize>,
}

/// Solves a standard-form SDP. `pinned` names a constraint row that must
/// survive dependency removal.
pub fn solve_standard<T: Real>(sdp: &Sdp<T>, opts: &SdpOptions<T>, pinned: Option<usize>) -> SdpSolution<T> {
    let n = sdp.n();
    let m = sdp.m();

    // Normalize constraints and cost, then drop dependent rows.
    let norms: Vec<T> = sdp.a.iter().map(|ai| ai.norm()).collect();
    let nonzero: Vec<usize> = (0..m).filter(|&i| norms[i] > T::zero()).collect();
    let kept: Vec<usize> = if nonzero.is_empty() {
        Vec::new()
    } else {
        let rows = DMatrix::from_fn(nonzero.len(), n * n, |r, k| sdp.a[nonzero[r]][k] / norms[nonzero[r]]);
        let pin = pinned.and_then(|p| nonzero.iter().position(|&i| i == p));
        match select_independent_rows(&rows, opts.dependency_tol, pin) {
            Ok(sel) => sel.into_iter().map(|r| nonzero[r]).collect(),
            Err(_) => nonzero.clone(),
        }
    };
    let dropped_rows: Vec<usize> = (0..m).filter(|i| !kept.contains(i)).collect();
    if !dropped_rows.is_empty() {
        log::debug!("sdp: dropping dependent constraint rows {dropped_rows:?}");
    }
    let cnorm = sdp.c.norm();
    let cscale = if cnorm > T::zero() { cnorm } else { T::one() };
    let c_s = &sdp.c / cscale;
    let a_s: Vec<DMatrix<T>> = kept.iter().map(|&i| &sdp.a[i] / norms[i]).collect();
    let b_s = DVector::from_iterator(kept.len(), kept.iter().map(|&i| sdp.b[i] / norms[i]));

    let core = ipm(&c_s, &a_s, &b_s, T::one() / cscale, opts.tol, opts.max_iter);

    let mut y = DVector::zeros(m);
    for (k, &i) in kept.iter().enumerate() {
        y[i] = core.y[k] * cscale / norms[i];
    }
    let x = symmetrize(&core.x);
    let s = sdp.slack(&y);
    let residuals = sdp.residuals(&x, &y).expect("shapes are consistent by construction");
    let status = if sdp.meets_thresholds(&x, &residuals, opts.status_tol()) {
        SdpStatus::Optimal
    } else if core.exhausted {
        SdpStatus::MaxIter
    } else {
        SdpStatus::NumericalFailure
    };
    log::debug!(
        "sdp: n={n} m={m} status={status:?} iters={} primal={:.2e} dual={:.2e} gap={:.2e}",
        core.iterations,
        residuals.primal_infeas.to_f64_lossy(),
        residuals.dual_infeas.to_f64_lossy(),
        residuals.gap.to_f64_lossy()
    );
    SdpSolution { x, y, s, status, residuals, iterations: core.iterations, dropped_rows }
}

struct IpmOutput<T: Real> {
    x: DMatrix<T>,
    y: DVector<T>,
    iterations: usize,
    exhausted: bool,
}

struct Scaling<T: Real> {
    g: DMatrix<T>,
    g_inv: DMatrix<T>,
    w: DMatrix<T>,
    lambda: DVector<T>,
    l_inv: DMatrix<T>,
    r_inv: DMatrix<T>,
}

/// Nesterov–Todd scaling point of `(X, S)`.
fn nt_scaling<T: Real>(x: &DMatrix<T>, s: &DMatrix<T>) -> Option<Scaling<T>> {
    let n = x.nrows();
    let l = x.clone().cholesky()?.l();
    let r = s.clone().cholesky()?.l();
    let svd = (r.transpose() * &l).svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let sig = svd.singular_values;
    if sig.iter().any(|&v| !(v > T::zero())) {
        return None;
    }
    let _ = u;
    let v = v_t.transpose();
    let half = DVector::from_iterator(n, sig.iter().map(|&v| T::one() / v.sqrt()));
    let g = &l * &v * DMatrix::from_diagonal(&half);
    let eye = DMatrix::identity(n, n);
    let l_inv = l.solve_lower_triangular(&eye)?;
    let r_inv = r.solve_lower_triangular(&eye)?;
    let sqrt_sig = DVector::from_iterator(n, sig.iter().map(|&v| v.sqrt()));
    let g_inv = DMatrix::from_diagonal(&sqrt_sig) * v.transpose() * &l_inv;
    let w = &g * g.transpose();
    Some(Scaling { g, g_inv, w, lambda: sig, l_inv, r_inv })
}

enum Schur<T: Real> {
    Chol(nalgebra::Cholesky<T, nalgebra::Dyn>),
    Lu(nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>),
}

impl<T: Real> Schur<T> {
    fn factor(m: DMatrix<T>) -> Option<Self> {
        if m.nrows() == 0 {
            return m.clone().cholesky().map(Schur::Chol);
        }
        match m.clone().cholesky() {
            Some(c) => Some(Schur::Chol(c)),
            None => {
                let lu = m.lu();
                if lu.is_invertible() {
                    Some(Schur::Lu(lu))
                } else {
                    None
                }
            }
        }
    }

    fn solve(&self, rhs: &DVector<T>) -> Option<DVector<T>> {
        match self {
            Schur::Chol(c) => Some(c.solve(rhs)),
            Schur::Lu(lu) => lu.solve(rhs),
        }
    }
}

/// Largest `α ≤ 1` keeping `P + α·dP ⪰ 0`, damped by the fraction to boundary.
fn step_length<T: Real>(p_inv_factor: &DMatrix<T>, dp: &DMatrix<T>) -> T {
    let scaled = symmetrize(&(p_inv_factor * dp * p_inv_factor.transpose()));
    let lmin = min_eig(&scaled);
    if lmin >= T::zero() {
        T::one()
    } else {
        (T::lit(STEP_FRACTION) * (-T::one() / lmin)).min(T::one())
    }
}

/// Mehrotra predictor-corrector path following with NT scaling, started from
/// the infeasible point `X = S = τI`, `y = 0`. The gap is measured relative to
/// `gap_unit + |⟨C, X⟩|`; passing `1/‖C‖` for a cost normalized by `‖C‖`
/// reproduces the unscaled test `|gap| ≤ tol·(1 + |pobj|)`.
fn ipm<T: Real>(
    c: &DMatrix<T>,
    a: &[DMatrix<T>],
    b: &DVector<T>,
    gap_unit: T,
    tol: T,
    max_iter: usize,
) -> IpmOutput<T> {
    let n = c.nrows();
    let m = a.len();
    let a = Constraints::new(a);
    let one = T::one();
    let tau = one + c.norm();
    let mut x = DMatrix::<T>::identity(n, n) * tau;
    let mut s = DMatrix::<T>::identity(n, n) * tau;
    let mut y = DVector::<T>::zeros(m);
    let nn = T::from_count(n.max(1));
    let bnorm = b.norm();
    let cnorm = c.norm();

    let mut best: Option<(T, DMatrix<T>, DVector<T>)> = None;
    let mut stall = 0usize;
    let mut iterations = 0usize;
    let mut exhausted = true;

    for it in 0..max_iter {
        iterations = it;
        let rp = b - a.apply(&x);
        let rd = c - a.apply_t(&y, n) - &s;
        let mu = frob_dot(&x, &s) / nn;
        let pobj = frob_dot(c, &x);
        let dobj = b.dot(&y);
        let relp = rp.norm() / (one + bnorm);
        let reld = rd.norm() / (one + cnorm);
        let relgap = (pobj - dobj).abs() / (gap_unit + pobj.abs());
        let merit = relp.max(reld).max(relgap);
        log::trace!(
            "ipm it={it} pobj={:.12e} dobj={:.12e} relp={:.2e} reld={:.2e} gap={:.2e}",
            pobj.to_f64_lossy(),
            dobj.to_f64_lossy(),
            relp.to_f64_lossy(),
            reld.to_f64_lossy(),
            relgap.to_f64_lossy()
        );
        match &best {
            Some((bm, _, _)) if merit >= *bm => stall += 1,
            _ => {
                best = Some((merit, x.clone(), y.clone()));
                stall = 0;
            }
        }
        if merit <= tol {
            exhausted = false;
            break;
        }
        if stall >= STALL_LIMIT || x.norm() > T::lit(DIVERGENCE_NORM) || s.norm() > T::lit(DIVERGENCE_NORM) {
            exhausted = false;
            break;
        }

        let Some(sc) = nt_scaling(&x, &s) else {
            exhausted = false;
            break;
        };
        let schur = a.schur(&sc.w);
        let Some(fact) = Schur::factor(schur) else {
            exhausted = false;
            break;
        };
        let h_rhs = &rp + a.apply(&(&sc.w * &rd * &sc.w));

        let direction = |rc: &DMatrix<T>| -> Option<(DMatrix<T>, DVector<T>, DMatrix<T>)> {
            let z = DMatrix::from_fn(n, n, |i, j| T::lit(2.0) * rc[(i, j)] / (sc.lambda[i] + sc.lambda[j]));
            let gzg = &sc.g * z * sc.g.transpose();
            let rhs = &h_rhs - a.apply(&gzg);
            let dy = fact.solve(&rhs)?;
            let ds = &rd - a.apply_t(&dy, n);
            let dx = symmetrize(&(gzg - &sc.w * &ds * &sc.w));
            Some((dx, dy, symmetrize(&ds)))
        };

        let lam2 = DMatrix::from_diagonal(&sc.lambda.map(|v| v * v));
        let Some((dxa, _dya, dsa)) = direction(&(-&lam2)) else {
            exhausted = false;
            break;
        };
        let ap = step_length(&sc.l_inv, &dxa);
        let ad = step_length(&sc.r_inv, &dsa);
        let mu_aff = frob_dot(&(&x + &dxa * ap), &(&s + &dsa * ad)) / nn;
        let sigma = if mu > T::zero() { (mu_aff / mu).max(T::zero()).min(one).powi(3) } else { T::zero() };

        let dxt = &sc.g_inv * &dxa * sc.g_inv.transpose();
        let dst = sc.g.transpose() * &dsa * &sc.g;
        let cross = symmetrize(&(dxt * dst));
        let rc = DMatrix::<T>::identity(n, n) * (sigma * mu) - lam2 - cross;
        let Some((dx, dy, ds)) = direction(&rc) else {
            exhausted = false;
            break;
        };
        let ap = step_length(&sc.l_inv, &dx);
        let ad = step_length(&sc.r_inv, &ds);
        x = symmetrize(&(&x + dx * ap));
        y += dy * ad;
        s = symmetrize(&(&s + ds * ad));
        iterations = it + 1;
    }

    // Return the last iterate if it converged, otherwise the best one seen.
    let rp = b - a.apply(&x);
    let rd = c - a.apply_t(&y, n) - &s;
    let pobj = frob_dot(c, &x);
    let dobj = b.dot(&y);
    let merit =
        (rp.norm() / (one + bnorm)).max(rd.norm() / (one + cnorm)).max((pobj - dobj).abs() / (gap_unit + pobj.abs()));
    let (x, y) = match best {
        Some((bm, bx, by)) if bm < merit => (bx, by),
        _ => (x, y),
    };
    IpmOutput { x, y, iterations, exhausted }
}

/// Shor relaxation of a homogenized QCQP. Constraint rows are ordered
/// `(A_1, …, A_m, A_0)` with right-hand sides `(0, …, 0, 1)`.
#[derive(Debug, Clone)]
pub struct ShorSdp<T: Real> {
    sdp: Sdp<T>,
    homog_index: usize,
}

pub fn build_shor_relaxation<T: Real>(q: &HomQcqp<T>) -> ShorSdp<T> {
    let mut a: Vec<DMatrix<T>> = q.a_all().to_vec();
    a.push(q.a0().clone());
    let mut b = DVector::zeros(q.m() + 1);
    b[q.m()] = T::one();
    ShorSdp {
        sdp: Sdp::new(q.q().clone(), a, b).expect("QCQP matrices are square and share a dimension"),
        homog_index: q.homog_index(),
    }
}

impl<T: Real> ShorSdp<T> {
    pub fn n(&self) -> usize {
        self.sdp.n()
    }

    /// Number of constraints including the homogenizing one.
    pub fn num_constraints(&self) -> usize {
        self.sdp.m()
    }

    pub fn homog_index(&self) -> usize {
        self.homog_index
    }

    pub fn cost(&self) -> &DMatrix<T> {
        self.sdp.c()
    }

    /// `(A_i, b_i)` for row `i`; the last row is homogenizing.
    pub fn constraint(&self, i: usize) -> (&DMatrix<T>, T) {
        (&self.sdp.a()[i], self.sdp.b()[i])
    }

    pub fn as_standard(&self) -> &Sdp<T> {
        &self.sdp
    }

    /// `H = C + Σ λ_i A_i`.
    pub fn certificate(&self, lambda: &DVector<T>) -> DMatrix<T> {
        self.sdp.slack(&(-lambda))
    }
}

/// Primal-dual bundle of a Shor relaxation, expressed in QCQP multipliers.
#[derive(Debug, Clone)]
pub struct SdpPrimalDual<T: Real> {
    pub x: DMatrix<T>,
    /// `(λ_1, …, λ_m, λ_0)`.
    pub lambda: DVector<T>,
    /// Certificate matrix, recomputed from `lambda`.
    pub h: DMatrix<T>,
    pub status: SdpStatus,
    pub residuals: SdpResiduals<T>,
    pub iterations: usize,
    pub dropped_rows: Vec<usize>,
    /// Primal matrix as returned by the interior-point iterations, before any
    /// rank-1 polish. Tightness is judged on this matrix.
    pub raw_x: DMatrix<T>,
    pub polished: bool,
}

impl<T: Real> SdpPrimalDual<T> {
    pub fn objective(&self, sdp: &ShorSdp<T>) -> T {
        frob_dot(sdp.cost(), &self.x)
    }
}

pub fn solve_sdp<T: Real>(sdp: &ShorSdp<T>, opts: &SdpOptions<T>) -> SdpPrimalDual<T> {
    let homog_row = sdp.num_constraints() - 1;
    let sol = solve_standard(&sdp.sdp, opts, Some(homog_row));
    let lambda = -&sol.y;
    let mut out = SdpPrimalDual {
        raw_x: sol.x.clone(),
        x: sol.x,
        lambda,
        h: sol.s,
        status: sol.status,
        residuals: sol.residuals,
        iterations: sol.iterations,
        dropped_rows: sol.dropped_rows,
        polished: false,
    };
    if opts.polish {
        let kept: Vec<usize> = (0..sdp.num_constraints()).filter(|i| !out.dropped_rows.contains(i)).collect();
        if let Some((x, lambda)) = polish_rank1(&sdp.sdp, &out.x, &out.lambda, &kept, sdp.homog_index) {
            let xx = &x * x.transpose();
            let y = -&lambda;
            let res = sdp.sdp.residuals(&xx, &y).expect("shapes are consistent by construction");
            if sdp.sdp.meets_thresholds(&xx, &res, opts.status_tol()) {
                out.h = sdp.certificate(&lambda);
                out.x = xx;
                out.lambda = lambda;
                out.residuals = res;
                out.status = SdpStatus::Optimal;
                out.polished = true;
            } else {
                log::debug!("sdp: rank-1 polish rejected {res:?}");
            }
        }
    }
    out
}

/// Gauss–Newton refinement of a numerically rank-1 solution on
///
/// ```text
/// H(λ) x = 0,   ½ (xᵀ A_i x − b_i) = 0   (i kept),
/// ```
///
/// followed by moving `λ` to the analytic center of the optimal dual face.
fn polish_rank1<T: Real>(
    sdp: &Sdp<T>,
    xmat: &DMatrix<T>,
    lambda: &DVector<T>,
    kept: &[usize],
    homog_index: usize,
) -> Option<(DVector<T>, DVector<T>)> {
    let n = sdp.n();
    let k = kept.len();
    let eig = crate::symlin::sym_eig(xmat);
    if n >= 2 {
        let (l1, l2) = (eig.eigenvalues[0], eig.eigenvalues[1]);
        if !(l1 > T::zero()) || l2 * T::lit(POLISH_RATIO) > l1 {
            return None;
        }
    }
    let mut x: DVector<T> = eig.eigenvectors.column(0) * eig.eigenvalues[0].max(T::zero()).sqrt();
    if x[homog_index] < T::zero() {
        x = -x;
    }
    let mut lam: DVector<T> = DVector::from_iterator(k, kept.iter().map(|&i| lambda[i]));
    let a: Vec<&DMatrix<T>> = kept.iter().map(|&i| &sdp.a[i]).collect();
    let b: Vec<T> = kept.iter().map(|&i| sdp.b[i]).collect();
    let half = T::lit(0.5);

    let kkt_residual = |x: &DVector<T>, lam: &DVector<T>| -> (DVector<T>, DMatrix<T>, DMatrix<T>) {
        let mut h = sdp.c.clone();
        for (ai, &li) in a.iter().zip(lam.iter()) {
            h += *ai * li;
        }
        let mut g = DMatrix::zeros(k, n);
        let mut f = DVector::zeros(n + k);
        f.rows_mut(0, n).copy_from(&(&h * x));
        for (i, ai) in a.iter().enumerate() {
            let ax = *ai * x;
            g.set_row(i, &ax.transpose());
            f[n + i] = half * (x.dot(&ax) - b[i]);
        }
        (f, h, g)
    };

    let (mut f, mut h, mut g) = kkt_residual(&x, &lam);
    for _ in 0..POLISH_MAX_ITER {
        let fnorm = f.norm();
        let mut j = DMatrix::zeros(n + k, n + k);
        j.view_mut((0, 0), (n, n)).copy_from(&h);
        j.view_mut((0, n), (n, k)).copy_from(&g.transpose());
        j.view_mut((n, 0), (k, n)).copy_from(&g);
        let svd = j.svd(true, true);
        let smax = svd.singular_values.max();
        let d = svd.solve(&(-&f), smax * T::lit(1e-13)).ok()?;
        let x_new = &x + d.rows(0, n);
        let lam_new = &lam + d.rows(n, k);
        let (f_new, h_new, g_new) = kkt_residual(&x_new, &lam_new);
        let new_norm = f_new.norm();
        if !(new_norm < fnorm) {
            break;
        }
        x = x_new;
        lam = lam_new;
        f = f_new;
        h = h_new;
        g = g_new;
        if new_norm > fnorm * half {
            break;
        }
    }
    if x[homog_index] <= T::zero() {
        return None;
    }
    let lam = center_multipliers(&sdp.c, &a, &x, &g, lam);
    let mut full = DVector::zeros(sdp.m());
    for (pos, &i) in kept.iter().enumerate() {
        full[i] = lam[pos];
    }
    Some((x, full))
}

/// Moves `λ` within `{λ : Gᵀλ = Gᵀλ₀}` to the maximizer of `log det` of the
/// certificate restricted to `x⊥`. Returns the input unchanged when the face is
/// a point or the restricted certificate is not positive definite.
fn center_multipliers<T: Real>(
    c: &DMatrix<T>,
    a: &[&DMatrix<T>],
    x: &DVector<T>,
    g: &DMatrix<T>,
    lam: DVector<T>,
) -> DVector<T> {
    let n = c.nrows();
    let k = a.len();
    if n < 2 || k == 0 {
        return lam;
    }
    // Left null space of G.
    let mut padded = DMatrix::zeros(k, n.max(k));
    padded.view_mut((0, 0), (k, n)).copy_from(g);
    let svd = padded.svd(true, false);
    let Some(u) = svd.u else { return lam };
    let smax = svd.singular_values.max();
    let null: Vec<usize> = (0..k).filter(|&i| svd.singular_values[i] <= smax * T::lit(1e-9)).collect();
    if null.is_empty() {
        return lam;
    }
    // Orthonormal basis of x⊥.
    let xhat = x.normalize();
    let proj = DMatrix::<T>::identity(n, n) - &xhat * xhat.transpose();
    let pe = crate::symlin::sym_eig(&proj);
    let p = pe.eigenvectors.columns(0, n - 1).clone_owned();

    let restrict = |m: &DMatrix<T>| symmetrize(&(p.transpose() * m * &p));
    let dirs: Vec<DMatrix<T>> = null
        .iter()
        .map(|&col| {
            let mut bsum = DMatrix::zeros(n, n);
            for (i, ai) in a.iter().enumerate() {
                bsum += *ai * u[(i, col)];
            }
            restrict(&bsum)
        })
        .collect();
    let d = dirs.len();
    let certificate = |lam: &DVector<T>| {
        let mut h = c.clone();
        for (ai, &li) in a.iter().zip(lam.iter()) {
            h += *ai * li;
        }
        restrict(&h)
    };

    let mut z = DVector::<T>::zeros(d);
    let lam_at = |z: &DVector<T>| {
        let mut out = lam.clone();
        for (j, &col) in null.iter().enumerate() {
            out += u.column(col) * z[j];
        }
        out
    };
    for _ in 0..50 {
        let kmat = certificate(&lam_at(&z));
        let Some(chol) = kmat.cholesky() else { return lam };
        let kinv_b: Vec<DMatrix<T>> = dirs.iter().map(|bk| chol.solve(bk)).collect();
        let grad = DVector::from_iterator(d, kinv_b.iter().map(|m| m.trace()));
        let kinv_b_t: Vec<DMatrix<T>> = kinv_b.iter().map(|m| m.transpose()).collect();
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let v = -kinv_b_t[i].dot(&kinv_b[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let Some(hchol) = (-&hess).cholesky() else { break };
        let step = hchol.solve(&grad);
        let dec = grad.dot(&step).max(T::zero()).sqrt();
        let t = if dec < T::lit(0.25) { T::one() } else { T::one() / (T::one() + dec) };
        z += &step * t;
        if dec < T::lit(1e-12) {
            break;
        }
    }
    lam_at(&z)
}

/// Wraps an externally computed `(X, λ)`. Everything is recomputed here and the
/// status follows from the residual thresholds alone.
pub fn inject_external_solution<T: Real>(
    sdp: &ShorSdp<T>,
    x: &DMatrix<T>,
    lambda: &DVector<T>,
) -> Result<SdpPrimalDual<T>, SdpError> {
    let n = sdp.n();
    if x.nrows() != n || x.ncols() != n {
        return Err(SdpError::DimensionMismatch { expected: n, found: x.nrows().max(x.ncols()) });
    }
    if lambda.len() != sdp.num_constraints() {
        return Err(SdpError::DimensionMismatch { expected: sdp.num_constraints(), found: lambda.len() });
    }
    let xs = symmetrize(x);
    let y = -lambda;
    let residuals = sdp.sdp.residuals(&xs, &y)?;
    let status = if sdp.sdp.meets_thresholds(&xs, &residuals, T::lit(STATUS_TOL)) {
        SdpStatus::Optimal
    } else {
        SdpStatus::NumericalFailure
    };
    Ok(SdpPrimalDual {
        h: sdp.certificate(lambda),
        raw_x: xs.clone(),
        polished: false,
        x: xs,
        lambda: lambda.clone(),
        status,
        residuals,
        iterations: 0,
        dropped_rows: Vec::new(),
    })
}
