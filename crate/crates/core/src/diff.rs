//! Backward passes through a certified QCQP solution.
//!
//! With the KKT residual
//!
//! ```text
//! F(x, λ; ν) = [ 2 H(λ) x ;  xᵀA_i x (i retained) ;  xᵀA_0 x − 1 ]
//! ```
//!
//! the solution Jacobian is `J = −P M_r† N`, where `M_r = ∂F/∂(x, λ)` and
//! `N = ∂F/∂ν`. A backward pass therefore solves `min ‖M_rᵀ y − [g; 0]‖` and
//! returns `−Nᵀ y`.
//!
//! * [`backprop_is`] uses the rectangular `M_r` with the full `Gᵀ` block and the
//!   multipliers of the SDP dual.
//! * [`backprop_cift`] recomputes multipliers on an independent subset of the
//!   constraints and solves the resulting square system.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::certify::{CertifiedSolution, Verdict};
use crate::qcqp::{HomQcqp, ParamSymMatrix, QcqpError, VectorizedParams};
use crate::scalar::Real;
use crate::symlin::{
    dense_lstsq, lsqr, select_independent_rows, symmetrize, FnOperator, LinearOperator, LsqrOptions, LsqrStop,
    SymlinError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("stationarity residual ‖H x‖ = {residual:e} exceeds {limit:e}")]
    NotStationary { residual: f64, limit: f64 },
    #[error("LSQR did not converge in {iterations} iterations (residual {residual:e})")]
    LsqrDiverged { iterations: usize, residual: f64 },
    #[error("recomputed multipliers leave ‖H_r x‖ = {residual:e} above {limit:e}")]
    MultiplierResidualTooLarge { residual: f64, limit: f64 },
    #[error("relaxation is not tight at parameter {param} (step {sign:+}), verdict {verdict:?}")]
    TightnessLostUnderPerturbation { param: usize, sign: i8, verdict: Verdict },
    #[error("perturbed solve failed at parameter {param}: {message}")]
    PerturbedSolveFailed { param: usize, message: String },
    #[error(transparent)]
    Linalg(#[from] SymlinError),
    #[error(transparent)]
    Qcqp(#[from] QcqpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackpropMethod {
    Is,
    Cift,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackpropOptions<T> {
    pub atol: T,
    pub btol: T,
    /// LSQR iteration cap; `None` means `10·(n + m)`.
    pub max_iter: Option<usize>,
    pub damp: T,
    /// Relative tolerance for selecting independent constraint gradients.
    pub row_tol: T,
    pub stat_tol: T,
    /// Use the square system with `G_rᵀ` in the upper-right block instead of
    /// the full `Gᵀ`.
    pub fully_reduced_kkt: bool,
}

impl<T: Real> Default for BackpropOptions<T> {
    fn default() -> Self {
        Self {
            atol: T::lit(1e-10),
            btol: T::lit(1e-10),
            max_iter: None,
            damp: T::zero(),
            row_tol: T::lit(1e-8),
            stat_tol: T::lit(1e-6),
            fully_reduced_kkt: false,
        }
    }
}

impl<T: Real> BackpropOptions<T> {
    fn lsqr_options(&self, n: usize, m: usize) -> LsqrOptions<T> {
        LsqrOptions {
            atol: self.atol,
            btol: self.btol,
            conlim: T::zero(),
            max_iter: self.max_iter.unwrap_or(10 * (n + m)),
            damp: self.damp,
        }
    }
}

/// Gradient of a scalar loss with respect to `ν = [vec Q; vec A_1; …; vec A_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport<T: Real> {
    pub grad_q: DMatrix<T>,
    pub grad_a: Vec<DMatrix<T>>,
    pub method: BackpropMethod,
    pub lsqr_iters: usize,
    pub lsqr_residual: T,
    pub lsqr_stop: LsqrStop,
}

impl<T: Real> GradientReport<T> {
    pub fn to_vectorized(&self) -> VectorizedParams<T> {
        VectorizedParams::from_matrices(&self.grad_q, &self.grad_a)
    }

    /// `dℓ/dθ` through the sensitivity maps of the cost and every constraint
    /// that carries one. All sensitivity maps must share the parameter count
    /// `n_params`.
    pub fn chain(&self, q: &HomQcqp<T>, n_params: usize) -> Result<DVector<T>, DiffError> {
        let mut out = DVector::zeros(n_params);
        let mut add = |p: &ParamSymMatrix<T>, g: &DMatrix<T>| -> Result<(), DiffError> {
            if p.n_params() == 0 {
                return Ok(());
            }
            if p.n_params() != n_params {
                return Err(DiffError::DimensionMismatch { expected: n_params, found: p.n_params() });
            }
            out += p.chain_gradient(g);
            Ok(())
        };
        add(q.cost(), &self.grad_q)?;
        for (a, g) in q.constraints().iter().zip(&self.grad_a) {
            add(a, g)?;
        }
        Ok(out)
    }

    /// `‖·‖_∞` of the concatenated gradient.
    pub fn max_abs(&self) -> T {
        self.grad_a.iter().fold(self.grad_q.amax(), |m, g| m.max(g.amax()))
    }
}

/// Cached KKT blocks at a certified solution.
#[derive(Debug, Clone)]
pub struct KktWorkspace<T: Real> {
    pub h_bar: DMatrix<T>,
    /// Rows `(A_i x)ᵀ` then `(A_0 x)ᵀ`.
    pub g: DMatrix<T>,
    /// Sorted; always contains the homogenizing row `m`.
    pub independent_rows: Vec<usize>,
    /// Rows of `g` listed in `independent_rows`.
    pub g_r: DMatrix<T>,
    pub x: DVector<T>,
    /// `(λ_1, …, λ_m, λ_0)`.
    pub lambda: DVector<T>,
    /// `λ` without `λ_0`.
    pub lambda_prime: DVector<T>,
}

impl<T: Real> KktWorkspace<T> {
    pub fn new(
        q: &HomQcqp<T>,
        x: &DVector<T>,
        lambda: &DVector<T>,
        opts: &BackpropOptions<T>,
    ) -> Result<Self, DiffError> {
        let m = q.m();
        let h_bar = q.certificate_matrix(lambda)?;
        let g = q.constraint_gradients(x)?;
        let residual = (&h_bar * x).norm();
        let limit = opts.stat_tol * (T::one() + h_bar.norm());
        if residual > limit {
            return Err(DiffError::NotStationary { residual: residual.to_f64_lossy(), limit: limit.to_f64_lossy() });
        }
        let independent_rows = select_independent_rows(&g, opts.row_tol, Some(m))?;
        Ok(Self {
            h_bar,
            g_r: select_rows(&g, &independent_rows),
            g,
            independent_rows,
            x: x.clone(),
            lambda_prime: lambda.rows(0, m).clone_owned(),
            lambda: lambda.clone(),
        })
    }

    pub fn from_certified(
        q: &HomQcqp<T>,
        cert: &CertifiedSolution<T>,
        opts: &BackpropOptions<T>,
    ) -> Result<Self, DiffError> {
        Self::new(q, &cert.x, &cert.lambda, opts)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Number of user constraints.
    pub fn m(&self) -> usize {
        self.lambda_prime.len()
    }

    pub fn g_reduced(&self) -> DMatrix<T> {
        self.g_r.clone()
    }

    /// Dense `M_r = 2 [[H̄, Gᵀ], [G_r, 0]]`.
    pub fn m_r(&self) -> DMatrix<T> {
        kkt_matrix(&self.h_bar, &self.g, &self.g_r)
    }

    /// Matrix-free `M_rᵀ`, the operator the IS backward pass solves with.
    pub fn m_r_transpose(&self) -> impl LinearOperator<T> + '_ {
        kkt_transpose_operator(&self.h_bar, &self.g, &self.g_r)
    }
}

fn select_rows<T: Real>(g: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), g.ncols(), |r, c| g[(rows[r], c)])
}

/// `2 [[H, Bᵀ], [C, 0]]` with `B` spanning the multiplier columns and `C` the
/// constraint rows.
fn kkt_matrix<T: Real>(h: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>) -> DMatrix<T> {
    let n = h.nrows();
    let (p, q) = (c.nrows(), b.nrows());
    let mut m = DMatrix::zeros(n + p, n + q);
    m.view_mut((0, 0), (n, n)).copy_from(h);
    m.view_mut((0, n), (n, q)).copy_from(&b.transpose());
    m.view_mut((n, 0), (p, n)).copy_from(c);
    m * T::lit(2.0)
}

/// Matrix-free `Kᵀ` for `K = 2 [[H, Bᵀ], [C, 0]]`:
/// `Kᵀ (v_x, v_c) = 2 [H v_x + Cᵀ v_c ; B v_x]`.
fn kkt_transpose_operator<'a, T: Real>(
    h: &'a DMatrix<T>,
    b: &'a DMatrix<T>,
    c: &'a DMatrix<T>,
) -> impl LinearOperator<T> + 'a {
    let n = h.nrows();
    let (p, q) = (c.nrows(), b.nrows());
    let two = T::lit(2.0);
    FnOperator::new(
        n + q,
        n + p,
        move |v: &DVector<T>| {
            let vx = v.rows(0, n);
            let vc = v.rows(n, p);
            let mut out = DVector::zeros(n + q);
            out.rows_mut(0, n).copy_from(&((h * vx + c.tr_mul(&vc)) * two));
            out.rows_mut(n, q).copy_from(&((b * vx) * two));
            out
        },
        move |w: &DVector<T>| {
            let wx = w.rows(0, n);
            let wl = w.rows(n, q);
            let mut out = DVector::zeros(n + p);
            out.rows_mut(0, n).copy_from(&((h * wx + b.tr_mul(&wl)) * two));
            out.rows_mut(n, p).copy_from(&((c * wx) * two));
            out
        },
    )
}

/// Matrix-free `N` restricted to the stationarity rows and the constraint rows
/// in `rows` (which may include the homogenizing row `m`, whose `N` row is 0).
pub struct NOperator<'a, T: Real> {
    x: &'a DVector<T>,
    lambda_prime: &'a DVector<T>,
    rows: &'a [usize],
}

impl<'a, T: Real> NOperator<'a, T> {
    pub fn new(x: &'a DVector<T>, lambda_prime: &'a DVector<T>, rows: &'a [usize]) -> Self {
        Self { x, lambda_prime, rows }
    }

    fn unvec(&self, v: &DVector<T>, k: usize) -> DMatrix<T> {
        let n = self.x.len();
        let nn = n * n;
        DMatrix::from_column_slice(n, n, &v.as_slice()[k * nn..(k + 1) * nn])
    }
}

impl<T: Real> LinearOperator<T> for NOperator<'_, T> {
    fn nrows(&self) -> usize {
        self.x.len() + self.rows.len()
    }

    fn ncols(&self) -> usize {
        (self.lambda_prime.len() + 1) * self.x.len() * self.x.len()
    }

    fn apply(&self, dnu: &DVector<T>) -> DVector<T> {
        let n = self.x.len();
        let m = self.lambda_prime.len();
        let two = T::lit(2.0);
        let mut stat = self.unvec(dnu, 0) * self.x * two;
        for i in 0..m {
            stat += self.unvec(dnu, i + 1) * self.x * (two * self.lambda_prime[i]);
        }
        let mut out = DVector::zeros(self.nrows());
        out.rows_mut(0, n).copy_from(&stat);
        for (r, &i) in self.rows.iter().enumerate() {
            if i < m {
                out[n + r] = self.x.dot(&(self.unvec(dnu, i + 1) * self.x));
            }
        }
        out
    }

    fn apply_adjoint(&self, y: &DVector<T>) -> DVector<T> {
        let (q, a) = n_adjoint_unsymmetrized(self.x, self.lambda_prime, self.rows, y);
        VectorizedParams::from_matrices(&q, &a).as_vector().clone()
    }
}

fn n_adjoint_unsymmetrized<T: Real>(
    x: &DVector<T>,
    lambda_prime: &DVector<T>,
    rows: &[usize],
    y: &DVector<T>,
) -> (DMatrix<T>, Vec<DMatrix<T>>) {
    let n = x.len();
    let m = lambda_prime.len();
    let two = T::lit(2.0);
    let yx = y.rows(0, n);
    let outer = yx * x.transpose() * two;
    let xx = x * x.transpose();
    let mut grad_a: Vec<DMatrix<T>> = lambda_prime.iter().map(|&l| &outer * l).collect();
    for (r, &i) in rows.iter().enumerate() {
        if i < m {
            grad_a[i] += &xx * y[n + r];
        }
    }
    (outer, grad_a)
}

/// `Nᵀ y`, symmetrized: `grad_Q = sym(2 y_x xᵀ)` and
/// `grad_A_i = sym(2 λ′_i y_x xᵀ + y_{g,i} x xᵀ)`, the second term only for
/// retained rows.
pub fn apply_n_adjoint<T: Real>(
    x: &DVector<T>,
    lambda_prime: &DVector<T>,
    rows: &[usize],
    y: &DVector<T>,
) -> Result<(DMatrix<T>, Vec<DMatrix<T>>), DiffError> {
    let n = x.len();
    let m = lambda_prime.len();
    if y.len() != n + rows.len() {
        return Err(DiffError::DimensionMismatch { expected: n + rows.len(), found: y.len() });
    }
    if let Some(&bad) = rows.iter().find(|&&i| i > m) {
        return Err(DiffError::DimensionMismatch { expected: m, found: bad });
    }
    let (q, a) = n_adjoint_unsymmetrized(x, lambda_prime, rows, y);
    Ok((symmetrize(&q), a.iter().map(symmetrize).collect()))
}

fn padded_rhs<T: Real>(incoming: &DVector<T>, total: usize) -> DVector<T> {
    let mut rhs = DVector::zeros(total);
    rhs.rows_mut(0, incoming.len()).copy_from(incoming);
    rhs
}

fn run_lsqr<T: Real, O: LinearOperator<T>>(
    op: &O,
    rhs: &DVector<T>,
    opts: &LsqrOptions<T>,
) -> Result<crate::symlin::LsqrSolution<T>, DiffError> {
    let sol = lsqr(op, rhs, opts)?;
    if !sol.stop.converged() {
        return Err(DiffError::LsqrDiverged { iterations: sol.iterations, residual: sol.residual_norm.to_f64_lossy() });
    }
    Ok(sol)
}

/// Backward pass using the pseudoinverse of `M_r`.
pub fn backprop_is<T: Real>(
    ws: &KktWorkspace<T>,
    incoming: &DVector<T>,
    opts: &BackpropOptions<T>,
) -> Result<GradientReport<T>, DiffError> {
    let n = ws.n();
    let m = ws.m();
    if incoming.len() != n {
        return Err(DiffError::DimensionMismatch { expected: n, found: incoming.len() });
    }
    let b_block = if opts.fully_reduced_kkt { &ws.g_r } else { &ws.g };
    let op = kkt_transpose_operator(&ws.h_bar, b_block, &ws.g_r);
    let rhs = padded_rhs(incoming, op.nrows());
    let sol = run_lsqr(&op, &rhs, &opts.lsqr_options(n, m))?;
    let (grad_q, grad_a) = apply_n_adjoint(&ws.x, &ws.lambda_prime, &ws.independent_rows, &(-&sol.x))?;
    Ok(GradientReport {
        grad_q,
        grad_a,
        method: BackpropMethod::Is,
        lsqr_iters: sol.iterations,
        lsqr_residual: sol.residual_norm,
        lsqr_stop: sol.stop,
    })
}

/// Multipliers `λ_r = −(G_rᵀ)† Q x` on the rows in `rows`, scattered into a
/// length-`m + 1` vector with zeros elsewhere.
pub fn reduced_multipliers<T: Real>(q: &HomQcqp<T>, x: &DVector<T>, rows: &[usize]) -> Result<DVector<T>, DiffError> {
    let g = q.constraint_gradients(x)?;
    let g_r = select_rows(&g, rows);
    let qx = q.q() * x;
    let lam_r = dense_lstsq(&g_r.transpose(), &(-qx)).ok_or(SymlinError::DegenerateInput("rank-deficient G_r"))?;
    let mut lambda = DVector::zeros(q.m() + 1);
    for (k, &i) in rows.iter().enumerate() {
        lambda[i] = lam_r[k];
    }
    Ok(lambda)
}

/// Backward pass with multipliers recomputed on an independent constraint subset.
pub fn backprop_cift<T: Real>(
    q: &HomQcqp<T>,
    x: &DVector<T>,
    incoming: &DVector<T>,
    opts: &BackpropOptions<T>,
) -> Result<GradientReport<T>, DiffError> {
    let n = q.n();
    let m = q.m();
    if incoming.len() != n || x.len() != n {
        return Err(DiffError::DimensionMismatch { expected: n, found: incoming.len().min(x.len()) });
    }
    let g = q.constraint_gradients(x)?;
    let rows = select_independent_rows(&g, opts.row_tol, Some(m))?;
    let lambda = reduced_multipliers(q, x, &rows)?;
    let h_r = q.certificate_matrix(&lambda)?;
    let residual = (&h_r * x).norm();
    let limit = opts.stat_tol * (T::one() + h_r.norm());
    if residual > limit {
        return Err(DiffError::MultiplierResidualTooLarge {
            residual: residual.to_f64_lossy(),
            limit: limit.to_f64_lossy(),
        });
    }
    let g_r = select_rows(&g, &rows);
    let op = kkt_transpose_operator(&h_r, &g_r, &g_r);
    let rhs = padded_rhs(incoming, op.nrows());
    let sol = run_lsqr(&op, &rhs, &opts.lsqr_options(n, m))?;
    let lambda_prime = lambda.rows(0, m).clone_owned();
    let (grad_q, grad_a) = apply_n_adjoint(x, &lambda_prime, &rows, &(-&sol.x))?;
    Ok(GradientReport {
        grad_q,
        grad_a,
        method: BackpropMethod::Cift,
        lsqr_iters: sol.iterations,
        lsqr_residual: sol.residual_norm,
        lsqr_stop: sol.stop,
    })
}

/// Runs the chosen backward pass at a certified solution.
pub fn backprop<T: Real>(
    q: &HomQcqp<T>,
    cert: &CertifiedSolution<T>,
    incoming: &DVector<T>,
    method: BackpropMethod,
    opts: &BackpropOptions<T>,
) -> Result<GradientReport<T>, DiffError> {
    match method {
        BackpropMethod::Is => backprop_is(&KktWorkspace::from_certified(q, cert, opts)?, incoming, opts),
        BackpropMethod::Cift => backprop_cift(q, &cert.x, incoming, opts),
    }
}

/// Full Jacobian `∂s/∂θ` of `s = select(x)` by one backward pass per output.
/// `select` is a `k × n` matrix and `chain` maps a report to `dℓ/dθ`.
pub fn backprop_jacobian<T: Real, B, C>(
    select: &DMatrix<T>,
    mut backward: B,
    mut chain: C,
) -> Result<DMatrix<T>, DiffError>
where
    B: FnMut(&DVector<T>) -> Result<GradientReport<T>, DiffError>,
    C: FnMut(&GradientReport<T>) -> Result<DVector<T>, DiffError>,
{
    let mut rows = Vec::with_capacity(select.nrows());
    for r in 0..select.nrows() {
        let g = select.row(r).transpose();
        rows.push(chain(&backward(&g)?)?.transpose());
    }
    Ok(DMatrix::from_rows(&rows))
}

/// Central-difference Jacobian of the certified solution, one column per
/// parameter, with steps `h·(1 + |θ_k|)`. Every perturbed solve must be
/// certified.
pub fn fd_jacobian_oracle<T: Real, P, S, E>(
    param_map: P,
    theta: &DVector<T>,
    h: T,
    mut solve: S,
) -> Result<DMatrix<T>, DiffError>
where
    P: Fn(&DVector<T>) -> HomQcqp<T>,
    S: FnMut(&HomQcqp<T>) -> Result<CertifiedSolution<T>, E>,
    E: std::fmt::Display,
{
    let d = theta.len();
    let mut cols: Vec<DVector<T>> = Vec::with_capacity(d);
    for k in 0..d {
        let step = h * (T::one() + theta[k].abs());
        let mut side = |sign: i8| -> Result<DVector<T>, DiffError> {
            let mut th = theta.clone();
            th[k] += if sign > 0 { step } else { -step };
            let cert = solve(&param_map(&th))
                .map_err(|e| DiffError::PerturbedSolveFailed { param: k, message: e.to_string() })?;
            if cert.verdict != Verdict::TightCertified {
                return Err(DiffError::TightnessLostUnderPerturbation { param: k, sign, verdict: cert.verdict });
            }
            Ok(cert.x)
        };
        let plus = side(1)?;
        let minus = side(-1)?;
        cols.push((plus - minus) / (step * T::lit(2.0)));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{certify, CertifyOptions};
    use crate::qcqp::build_hom_qcqp;
    use crate::sdp::{build_shor_relaxation, solve_sdp, SdpOptions};
    use crate::symlin::to_dense;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TABLE: [f64; 7] = [10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389];

    fn poly_qcqp(th: &DVector<f64>) -> HomQcqp<f64> {
        let pattern: [&[(usize, usize, f64)]; 7] = [
            &[(0, 0, 1.0)],
            &[(0, 1, 0.5)],
            &[(0, 2, 1.0 / 3.0), (1, 1, 1.0 / 3.0)],
            &[(0, 3, 0.25), (1, 2, 0.25)],
            &[(1, 3, 1.0 / 3.0), (2, 2, 1.0 / 3.0)],
            &[(2, 3, 0.5)],
            &[(3, 3, 1.0)],
        ];
        let mut trip = Vec::new();
        for (k, pat) in pattern.iter().enumerate() {
            for &(r, c, w) in *pat {
                trip.push((r, c, w * th[k]));
            }
        }
        let sens = pattern.iter().map(|p| p.to_vec()).collect();
        let cost = ParamSymMatrix::new(4, &trip).unwrap().with_sensitivity(sens).unwrap();
        let a1 = ParamSymMatrix::new(4, &[(0, 2, 0.5), (1, 1, -1.0)]).unwrap();
        let a2 = ParamSymMatrix::new(4, &[(0, 3, 1.0), (1, 2, -1.0)]).unwrap();
        let a3 = ParamSymMatrix::new(4, &[(1, 3, 0.5), (2, 2, -1.0)]).unwrap();
        build_hom_qcqp(cost, vec![a1, a2, a3], 0).unwrap()
    }

    fn solve(q: &HomQcqp<f64>) -> Result<CertifiedSolution<f64>, crate::certify::CertifyError> {
        let sol = solve_sdp(&build_shor_relaxation(q), &SdpOptions::default());
        certify(q, &sol, &CertifyOptions::default())
    }

    fn table() -> DVector<f64> {
        DVector::from_row_slice(&TABLE)
    }

    fn rel_inf(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax()
    }

    /// Dense `N` from the Kronecker formulas, column-major `vec`.
    fn dense_n(x: &DVector<f64>, lp: &DVector<f64>, rows: &[usize]) -> DMatrix<f64> {
        let n = x.len();
        let m = lp.len();
        let nn = n * n;
        let eye = DMatrix::<f64>::identity(n, n);
        let kron = x.transpose().kronecker(&eye) * 2.0;
        let mut out = DMatrix::zeros(n + rows.len(), (m + 1) * nn);
        out.view_mut((0, 0), (n, nn)).copy_from(&kron);
        for i in 0..m {
            out.view_mut((0, (i + 1) * nn), (n, nn)).copy_from(&(&kron * lp[i]));
        }
        let vxx = (x * x.transpose()).reshape_generic(nalgebra::Dyn(nn), nalgebra::Dyn(1));
        for (r, &i) in rows.iter().enumerate() {
            if i < m {
                out.view_mut((n + r, (i + 1) * nn), (1, nn)).copy_from(&vxx.transpose());
            }
        }
        out
    }

    fn random_symmetric_vec(rng: &mut ChaCha8Rng, n: usize, blocks: usize) -> DVector<f64> {
        let mats: Vec<DMatrix<f64>> = (0..blocks)
            .map(|_| {
                let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                (&b + b.transpose()) * 0.5
            })
            .collect();
        VectorizedParams::from_matrices(&mats[0], &mats[1..]).as_vector().clone()
    }

    #[test]
    fn n_operator_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..6);
            let m = rng.random_range(1..5);
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let lp = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
            let rows: Vec<usize> = (0..=m).filter(|_| rng.random_bool(0.7)).chain(std::iter::once(m)).collect();
            let mut rows = rows;
            rows.dedup();
            let op = NOperator::new(&x, &lp, &rows);
            let dense = dense_n(&x, &lp, &rows);
            assert!((to_dense(&op) - &dense).amax() <= 1e-12);
            let y = DVector::from_fn(n + rows.len(), |_, _| rng.random_range(-1.0..1.0));
            let dnu = random_symmetric_vec(&mut rng, n, m + 1);
            let (gq, ga) = apply_n_adjoint(&x, &lp, &rows, &y).unwrap();
            let lhs = VectorizedParams::from_matrices(&gq, &ga).as_vector().dot(&dnu);
            let rhs = y.dot(&(&dense * &dnu));
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn n_adjoint_single_outer_product() {
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let lp = DVector::zeros(2);
        let mut y = DVector::zeros(3 + 1);
        y[2] = 1.0;
        let (gq, ga) = apply_n_adjoint(&x, &lp, &[2], &y).unwrap();
        let mut e = DMatrix::zeros(3, 3);
        e[(2, 0)] = 2.0;
        assert_eq!(gq, symmetrize(&e));
        assert!(ga.iter().all(|g| g.amax() == 0.0));
        let (gq, _) = apply_n_adjoint(&x, &lp, &[2], &DVector::zeros(4)).unwrap();
        assert_eq!(gq.amax(), 0.0);
        assert!(apply_n_adjoint(&x, &lp, &[2], &DVector::zeros(3)).is_err());
    }

    #[test]
    fn polynomial_rows_drop_one_redundant_constraint() {
        let q = poly_qcqp(&table());
        let cert = solve(&q).unwrap();
        let ws = KktWorkspace::from_certified(&q, &cert, &BackpropOptions::default()).unwrap();
        assert_eq!(ws.independent_rows.len(), 3);
        assert!(ws.independent_rows.contains(&3));
    }

    #[test]
    fn kkt_operator_matches_dense_transpose() {
        let q = poly_qcqp(&table());
        let cert = solve(&q).unwrap();
        let ws = KktWorkspace::from_certified(&q, &cert, &BackpropOptions::default()).unwrap();
        let g_r = ws.g_reduced();
        let op = kkt_transpose_operator(&ws.h_bar, &ws.g, &g_r);
        assert!((to_dense(&op) - ws.m_r().transpose()).amax() <= 1e-14);
        let m_r = ws.m_r();
        let pinv = m_r.clone().pseudo_inverse(1e-12).unwrap();
        let ident = &m_r * &pinv;
        assert!((ident - DMatrix::identity(m_r.nrows(), m_r.nrows())).amax() <= 1e-8);
    }

    #[test]
    fn lsqr_on_kkt_reproduces_pseudoinverse_column() {
        let q = poly_qcqp(&table());
        let cert = solve(&q).unwrap();
        let ws = KktWorkspace::from_certified(&q, &cert, &BackpropOptions::default()).unwrap();
        let g_r = ws.g_reduced();
        let op = kkt_transpose_operator(&ws.h_bar, &ws.g, &g_r);
        let pinv_t = ws.m_r().transpose().pseudo_inverse(1e-12).unwrap();
        for j in 0..4 {
            let mut rhs = DVector::zeros(op.nrows());
            rhs[j] = 1.0;
            let y = crate::symlin::lsqr_solve(&op, &rhs, 1e-12, 1e-12, 200).unwrap();
            let oracle = pinv_t.column(j);
            assert!((&y - oracle).norm() <= 1e-8 * oracle.norm());
        }
    }

    #[test]
    fn zero_incoming_gives_zero_gradients() {
        let q = poly_qcqp(&table());
        let cert = solve(&q).unwrap();
        let opts = BackpropOptions::default();
        for method in [BackpropMethod::Is, BackpropMethod::Cift] {
            let rep = backprop(&q, &cert, &DVector::zeros(4), method, &opts).unwrap();
            assert_eq!(rep.max_abs(), 0.0);
        }
    }

    #[test]
    fn gradients_are_exactly_symmetric() {
        let q = poly_qcqp(&table());
        let cert = solve(&q).unwrap();
        let g = DVector::from_vec(vec![0.0, 1.0, 0.3, -0.2]);
        let rep = backprop(&q, &cert, &g, BackpropMethod::Is, &BackpropOptions::default()).unwrap();
        assert_eq!(rep.grad_q, rep.grad_q.transpose());
        for a in &rep.grad_a {
            assert_eq!(a, &a.transpose());
        }
        assert_eq!(rep.to_vectorized().as_vector().len(), 4 * 16);
    }

    fn jacobian(
        q: &HomQcqp<f64>,
        cert: &CertifiedSolution<f64>,
        method: BackpropMethod,
        opts: &BackpropOptions<f64>,
    ) -> DMatrix<f64> {
        backprop_jacobian(&DMatrix::identity(4, 4), |g| backprop(q, cert, g, method, opts), |r| r.chain(q, 7)).unwrap()
    }

    #[test]
    fn polynomial_jacobians_match_finite_differences() {
        let th = table();
        let q = poly_qcqp(&th);
        let cert = solve(&q).unwrap();
        let fd = fd_jacobian_oracle(poly_qcqp, &th, 1e-5, solve).unwrap();
        let opts = BackpropOptions::default();
        let j_is = jacobian(&q, &cert, BackpropMethod::Is, &opts);
        let j_cift = jacobian(&q, &cert, BackpropMethod::Cift, &opts);
        assert!(rel_inf(&j_is, &fd) <= 1e-4, "{}", rel_inf(&j_is, &fd));
        assert!(rel_inf(&j_cift, &fd) <= 1e-4, "{}", rel_inf(&j_cift, &fd));
        assert!(rel_inf(&j_is, &j_cift) <= 1e-6, "{}", rel_inf(&j_is, &j_cift));
        let reduced = BackpropOptions { fully_reduced_kkt: true, ..opts };
        let j_red = jacobian(&q, &cert, BackpropMethod::Is, &reduced);
        assert!(rel_inf(&j_red, &fd) <= 1e-4);
    }

    #[test]
    fn constant_param_map_gives_zero_jacobian() {
        let th = table();
        let fixed = poly_qcqp(&th);
        let fd = fd_jacobian_oracle(|_: &DVector<f64>| fixed.clone(), &DVector::from_vec(vec![0.5, 2.0]), 1e-5, solve)
            .unwrap();
        assert_eq!(fd.shape(), (4, 2));
        assert_eq!(fd.amax(), 0.0);
    }

    #[test]
    fn workspace_rejects_non_stationary_point() {
        let q = poly_qcqp(&table());
        let cert = solve(&q).unwrap();
        let t: f64 = 0.5;
        let x = DVector::from_vec(vec![1.0, t, t * t, t * t * t]);
        let err = KktWorkspace::new(&q, &x, &cert.lambda, &BackpropOptions::default()).unwrap_err();
        assert!(matches!(err, DiffError::NotStationary { .. }));
        let err = backprop_cift(&q, &x, &DVector::zeros(4), &BackpropOptions::default()).unwrap_err();
        assert!(matches!(err, DiffError::MultiplierResidualTooLarge { .. }));
    }
}
