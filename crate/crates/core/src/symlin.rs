//! Dense linear-algebra kernels used by the rest of the crate.
//!
//! * [`LinearOperator`]: matrix-free maps with an adjoint, consumed by [`lsqr`].
//! * [`lsqr`] / [`lsqr_solve`]: the Paige–Saunders LSQR iteration.
//! * [`sym_eig`]: symmetric eigendecomposition with eigenvalues sorted descending.
//! * [`select_independent_rows`]: rank-revealing row selection by column-pivoted
//!   Householder QR of `Gᵀ`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymlinError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("LSQR reached the iteration limit ({iterations}) without converging (residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("invalid tolerance {0:e}")]
    InvalidTolerance(f64),
}

/// A linear map `R^cols -> R^rows` together with its adjoint.
pub trait LinearOperator<T: Real> {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, v: &DVector<T>) -> DVector<T>;
    fn apply_adjoint(&self, u: &DVector<T>) -> DVector<T>;
}

impl<T: Real> LinearOperator<T> for DMatrix<T> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, v: &DVector<T>) -> DVector<T> {
        self * v
    }
    fn apply_adjoint(&self, u: &DVector<T>) -> DVector<T> {
        self.tr_mul(u)
    }
}

/// Operator built from a pair of closures.
pub struct FnOperator<F, G> {
    rows: usize,
    cols: usize,
    forward: F,
    adjoint: G,
}

impl<F, G> FnOperator<F, G> {
    pub fn new(rows: usize, cols: usize, forward: F, adjoint: G) -> Self {
        Self { rows, cols, forward, adjoint }
    }
}

impl<T, F, G> LinearOperator<T> for FnOperator<F, G>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
    G: Fn(&DVector<T>) -> DVector<T>,
{
    fn nrows(&self) -> usize {
        self.rows
    }
    fn ncols(&self) -> usize {
        self.cols
    }
    fn apply(&self, v: &DVector<T>) -> DVector<T> {
        (self.forward)(v)
    }
    fn apply_adjoint(&self, u: &DVector<T>) -> DVector<T> {
        (self.adjoint)(u)
    }
}

/// The adjoint of another operator.
pub struct Adjoint<'a, O: ?Sized>(pub &'a O);

impl<T: Real, O: LinearOperator<T> + ?Sized> LinearOperator<T> for Adjoint<'_, O> {
    fn nrows(&self) -> usize {
        self.0.ncols()
    }
    fn ncols(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, v: &DVector<T>) -> DVector<T> {
        self.0.apply_adjoint(v)
    }
    fn apply_adjoint(&self, u: &DVector<T>) -> DVector<T> {
        self.0.apply(u)
    }
}

/// Materializes an operator column by column. Intended for tests and small systems.
pub fn to_dense<T: Real, O: LinearOperator<T> + ?Sized>(op: &O) -> DMatrix<T> {
    let mut out = DMatrix::zeros(op.nrows(), op.ncols());
    for j in 0..op.ncols() {
        let mut e = DVector::zeros(op.ncols());
        e[j] = T::one();
        out.set_column(j, &op.apply(&e));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqrOptions<T> {
    pub atol: T,
    pub btol: T,
    /// Condition-number limit; `0` disables the test.
    pub conlim: T,
    pub max_iter: usize,
    /// Tikhonov damping. Zero gives plain least squares.
    pub damp: T,
}

impl<T: Real> LsqrOptions<T> {
    pub fn new(atol: T, btol: T, max_iter: usize) -> Self {
        Self { atol, btol, conlim: T::lit(1e8), max_iter, damp: T::zero() }
    }
}

/// Why LSQR stopped. Numbering follows the original Paige–Saunders report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsqrStop {
    /// `x = 0` is the exact solution (zero right-hand side or `Aᵀb = 0`).
    ZeroSolution,
    /// `Ax - b` is small enough given `atol`, `btol`.
    Consistent,
    /// The least-squares optimality residual `‖Aᵀr‖` is small enough given `atol`.
    LeastSquares,
    /// The condition estimate exceeded `conlim`.
    ConditionLimit,
    /// As `Consistent`, at machine precision.
    ConsistentMachinePrecision,
    /// As `LeastSquares`, at machine precision.
    LeastSquaresMachinePrecision,
    /// As `ConditionLimit`, at machine precision.
    ConditionMachinePrecision,
    IterationLimit,
}

impl LsqrStop {
    pub fn converged(self) -> bool {
        !matches!(self, LsqrStop::IterationLimit)
    }
}

#[derive(Debug, Clone)]
pub struct LsqrSolution<T: Real> {
    pub x: DVector<T>,
    pub stop: LsqrStop,
    pub iterations: usize,
    /// `‖b - Ax‖` (including the damping term when `damp > 0`).
    pub residual_norm: T,
    /// `‖Aᵀ(b - Ax)‖` estimate.
    pub normal_residual_norm: T,
    pub anorm: T,
    pub acond: T,
}

/// Runs LSQR and always returns the final iterate, together with the stop reason.
pub fn lsqr<T: Real, O: LinearOperator<T> + ?Sized>(
    op: &O,
    rhs: &DVector<T>,
    opts: &LsqrOptions<T>,
) -> Result<LsqrSolution<T>, SymlinError> {
    if rhs.len() != op.nrows() {
        return Err(SymlinError::DimensionMismatch { expected: op.nrows(), found: rhs.len() });
    }
    if opts.atol < T::zero() || opts.btol < T::zero() {
        return Err(SymlinError::InvalidTolerance(opts.atol.min(opts.btol).to_f64_lossy()));
    }

    let n = op.ncols();
    let damp = opts.damp;
    let ctol = if opts.conlim > T::zero() { T::one() / opts.conlim } else { T::zero() };

    let mut x = DVector::zeros(n);
    let mut u = rhs.clone();
    let bnorm = u.norm();
    let mut beta = bnorm;
    let mut v;
    let mut alpha;
    if beta > T::zero() {
        u /= beta;
        v = op.apply_adjoint(&u);
        alpha = v.norm();
    } else {
        v = DVector::zeros(n);
        alpha = T::zero();
    }
    if alpha > T::zero() {
        v /= alpha;
    }
    let mut w = v.clone();

    let mut rhobar = alpha;
    let mut phibar = beta;
    let mut anorm = T::zero();
    let mut acond = T::zero();
    let mut ddnorm = T::zero();
    let mut res2 = T::zero();
    let mut xxnorm = T::zero();
    let mut z = T::zero();
    let mut cs2 = -T::one();
    let mut sn2 = T::zero();
    let mut rnorm = beta;
    let mut arnorm = alpha * beta;

    if arnorm == T::zero() {
        return Ok(LsqrSolution {
            x,
            stop: LsqrStop::ZeroSolution,
            iterations: 0,
            residual_norm: rnorm,
            normal_residual_norm: arnorm,
            anorm,
            acond,
        });
    }

    let mut stop = LsqrStop::IterationLimit;
    let mut itn = 0;
    while itn < opts.max_iter {
        itn += 1;

        // Golub–Kahan bidiagonalization step.
        u = op.apply(&v) - &u * alpha;
        beta = u.norm();
        if beta > T::zero() {
            u /= beta;
            anorm = (anorm * anorm + alpha * alpha + beta * beta + damp * damp).sqrt();
            v = op.apply_adjoint(&u) - &v * beta;
            alpha = v.norm();
            if alpha > T::zero() {
                v /= alpha;
            }
        }

        // Eliminate the damping parameter.
        let rhobar1 = (rhobar * rhobar + damp * damp).sqrt();
        let cs1 = rhobar / rhobar1;
        let sn1 = damp / rhobar1;
        let psi = sn1 * phibar;
        phibar *= cs1;

        // Plane rotation eliminating the subdiagonal beta.
        let rho = (rhobar1 * rhobar1 + beta * beta).sqrt();
        let cs = rhobar1 / rho;
        let sn = beta / rho;
        let theta = sn * alpha;
        rhobar = -cs * alpha;
        let phi = cs * phibar;
        phibar *= sn;
        let tau = sn * phi;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        let dk_norm2 = w.norm_squared() / (rho * rho);
        x.axpy(t1, &w, T::one());
        w = &v + &w * t2;
        ddnorm += dk_norm2;

        // Estimate ‖x‖ via a second rotation.
        let delta = sn2 * rho;
        let gambar = -cs2 * rho;
        let rhs_z = phi - delta * z;
        let zbar = rhs_z / gambar;
        let xnorm = (xxnorm + zbar * zbar).sqrt();
        let gamma = (gambar * gambar + theta * theta).sqrt();
        cs2 = gambar / gamma;
        sn2 = theta / gamma;
        z = rhs_z / gamma;
        xxnorm += z * z;

        acond = anorm * ddnorm.sqrt();
        let res1 = phibar * phibar;
        res2 += psi * psi;
        rnorm = (res1 + res2).sqrt();
        arnorm = alpha * tau.abs();

        let test1 = rnorm / bnorm;
        let denom = anorm * rnorm;
        let test2 = if denom > T::zero() { arnorm / denom } else { T::zero() };
        let test3 = if acond > T::zero() { T::one() / acond } else { T::zero() };
        let t1 = test1 / (T::one() + anorm * xnorm / bnorm);
        let rtol = opts.btol + opts.atol * anorm * xnorm / bnorm;

        let one = T::one();
        if one + test3 <= one {
            stop = LsqrStop::ConditionMachinePrecision;
        }
        if one + test2 <= one {
            stop = LsqrStop::LeastSquaresMachinePrecision;
        }
        if one + t1 <= one {
            stop = LsqrStop::ConsistentMachinePrecision;
        }
        if test3 <= ctol {
            stop = LsqrStop::ConditionLimit;
        }
        if test2 <= opts.atol {
            stop = LsqrStop::LeastSquares;
        }
        if test1 <= rtol {
            stop = LsqrStop::Consistent;
        }
        if stop != LsqrStop::IterationLimit {
            break;
        }
    }

    Ok(LsqrSolution { x, stop, iterations: itn, residual_norm: rnorm, normal_residual_norm: arnorm, anorm, acond })
}

/// Least-squares solve `min ‖op·y − rhs‖₂`; hitting `max_iter` is an error.
pub fn lsqr_solve<T: Real, O: LinearOperator<T> + ?Sized>(
    op: &O,
    rhs: &DVector<T>,
    atol: T,
    btol: T,
    max_iter: usize,
) -> Result<DVector<T>, SymlinError> {
    if !(atol > T::zero() && btol > T::zero()) {
        return Err(SymlinError::InvalidTolerance(atol.min(btol).to_f64_lossy()));
    }
    let sol = lsqr(op, rhs, &LsqrOptions::new(atol, btol, max_iter))?;
    if sol.stop.converged() {
        Ok(sol.x)
    } else {
        Err(SymlinError::IterationLimit { iterations: sol.iterations, residual: sol.residual_norm.to_f64_lossy() })
    }
}

/// Symmetric eigendecomposition, eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct EigDecomp<T: Real> {
    pub eigenvalues: DVector<T>,
    /// Orthonormal eigenvectors, one per column, matching `eigenvalues`.
    pub eigenvectors: DMatrix<T>,
}

impl<T: Real> EigDecomp<T> {
    pub fn max(&self) -> T {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> T {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn reconstruct(&self) -> DMatrix<T> {
        let v = &self.eigenvectors;
        let scaled = v * DMatrix::from_diagonal(&self.eigenvalues);
        scaled * v.transpose()
    }
}

/// Eigendecomposition of the symmetric part of `s`.
pub fn sym_eig<T: Real>(s: &DMatrix<T>) -> EigDecomp<T> {
    assert!(s.is_square(), "sym_eig needs a square matrix");
    let n = s.nrows();
    if n == 0 {
        return EigDecomp { eigenvalues: DVector::zeros(0), eigenvectors: DMatrix::zeros(0, 0) };
    }
    let sym = symmetrize(s);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        eigenvectors.set_column(k, &eig.eigenvectors.column(i));
    }
    EigDecomp { eigenvalues, eigenvectors }
}

/// Eigenvalues only, descending.
pub fn sym_eigenvalues<T: Real>(s: &DMatrix<T>) -> DVector<T> {
    let mut vals: Vec<T> = symmetrize(s).symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(vals)
}

/// `(S + Sᵀ) / 2`.
pub fn symmetrize<T: Real>(s: &DMatrix<T>) -> DMatrix<T> {
    (s + s.transpose()) * T::lit(0.5)
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(g: &DMatrix<T>) -> T {
    if g.is_empty() {
        return T::zero();
    }
    let gram = if g.nrows() <= g.ncols() { g * g.transpose() } else { g.transpose() * g };
    let top = sym_eigenvalues(&gram)[0];
    top.max(T::zero()).sqrt()
}

/// Frobenius inner product `⟨A, B⟩ = tr(AᵀB)`.
pub fn frob_dot<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.dot(b)
}

const PIVOT_SLACK: f64 = 10.0;

/// Picks a maximal set of linearly independent rows of `g`.
///
/// Column-pivoted Householder QR on `gᵀ`: a row is accepted while its distance to
/// the span of the rows already accepted exceeds `tol · ‖g‖₂`. `keep`, when given,
/// is forced in as the first pivot. Returned indices are sorted ascending.
pub fn select_independent_rows<T: Real>(
    g: &DMatrix<T>,
    tol: T,
    keep: Option<usize>,
) -> Result<Vec<usize>, SymlinError> {
    if !(tol > T::zero()) {
        return Err(SymlinError::InvalidTolerance(tol.to_f64_lossy()));
    }
    let p = g.nrows();
    if p == 0 || g.ncols() == 0 {
        return Err(SymlinError::DegenerateInput("empty matrix"));
    }
    if let Some(k) = keep {
        if k >= p {
            return Err(SymlinError::DimensionMismatch { expected: p, found: k });
        }
    }
    let gnorm = spectral_norm(g);
    if gnorm == T::zero() {
        return Err(SymlinError::DegenerateInput("all rows are zero"));
    }
    let threshold = tol * gnorm;

    let mut a = g.transpose();
    let n = a.nrows();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut selected = Vec::new();

    for k in 0..n.min(p) {
        let remaining_norm = |a: &DMatrix<T>, j: usize| a.view((k, j), (n - k, 1)).norm();
        let pivot = if let (0, Some(kept)) = (k, keep) {
            kept
        } else {
            let norms: Vec<T> = (k..p).map(|j| remaining_norm(&a, j)).collect();
            let max_norm = norms.iter().fold(T::zero(), |m, &v| m.max(v));
            if max_norm <= threshold {
                break;
            }
            // Relaxed pivoting: the lowest original index whose remaining norm is
            // within a factor PIVOT_SLACK of the largest. Keeps the factorization
            // rank-revealing while preferring the caller's row order.
            let cutoff = max_norm / T::lit(PIVOT_SLACK);
            (k..p).filter(|&j| norms[j - k] >= cutoff).min_by_key(|&j| perm[j]).unwrap_or(k)
        };
        a.swap_columns(k, pivot);
        perm.swap(k, pivot);

        // Householder reflector zeroing a[k+1.., k].
        let col: DVector<T> = a.view((k, k), (n - k, 1)).column(0).clone_owned();
        let alpha = col.norm();
        if alpha == T::zero() {
            // Only reachable for a forced zero `keep` column.
            selected.push(perm[k]);
            continue;
        }
        let sign = if col[0] >= T::zero() { T::one() } else { -T::one() };
        let mut vh = col;
        vh[0] += sign * alpha;
        let vnorm2 = vh.norm_squared();
        if vnorm2 > T::zero() {
            let two = T::lit(2.0);
            for j in k..p {
                let mut cj = a.view_mut((k, j), (n - k, 1));
                let s = vh.dot(&cj.column(0)) * two / vnorm2;
                cj.column_mut(0).axpy(-s, &vh, T::one());
            }
        }
        selected.push(perm[k]);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Dense least squares `min ‖A x − b‖` for a full-column-rank `A` via Householder QR.
pub fn dense_lstsq<T: Real>(a: &DMatrix<T>, b: &DVector<T>) -> Option<DVector<T>> {
    if a.nrows() < a.ncols() || a.nrows() != b.len() {
        return None;
    }
    let qr = a.clone().qr();
    let qtb = qr.q().tr_mul(b);
    let r = qr.r();
    r.solve_upper_triangular(&qtb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lsqr_identity_returns_rhs() {
        let op = DMatrix::<f64>::identity(5, 5);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = lsqr_solve(&op, &b, 1e-12, 1e-12, 50).unwrap();
        assert!((y - b).norm() < 1e-12);
    }

    #[test]
    fn lsqr_identity_f32() {
        let op = DMatrix::<f32>::identity(3, 3);
        let b = DVector::from_vec(vec![1.0f32, -2.0, 0.5]);
        let y = lsqr_solve(&op, &b, 1e-6, 1e-6, 20).unwrap();
        assert!((y - b).norm() < 1e-5);
    }

    #[test]
    fn lsqr_zero_rhs_is_zero() {
        let op = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let sol = lsqr(&op, &DVector::zeros(2), &LsqrOptions::new(1e-10, 1e-10, 10)).unwrap();
        assert_eq!(sol.stop, LsqrStop::ZeroSolution);
        assert_eq!(sol.x.norm(), 0.0);
    }

    #[test]
    fn lsqr_rejects_bad_dimensions() {
        let op = DMatrix::<f64>::identity(3, 3);
        let err = lsqr_solve(&op, &DVector::zeros(4), 1e-8, 1e-8, 10).unwrap_err();
        assert_eq!(err, SymlinError::DimensionMismatch { expected: 3, found: 4 });
    }

    #[test]
    fn lsqr_reports_iteration_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 30, 30);
        let b = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let err = lsqr_solve(&a, &b, 1e-14, 1e-14, 2).unwrap_err();
        assert!(matches!(err, SymlinError::IterationLimit { iterations: 2, .. }));
    }

    #[test]
    fn lsqr_matches_dense_qr_on_tall_system() {
        // Oracle: Householder QR least squares.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 20, 12) + DMatrix::identity(20, 12) * 2.0;
        let b = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let oracle = dense_lstsq(&a, &b).unwrap();
        let y = lsqr_solve(&a, &b, 1e-14, 1e-14, 500).unwrap();
        assert!((&y - &oracle).norm() <= 1e-8 * oracle.norm(), "{}", (&y - &oracle).norm());
    }

    #[test]
    fn lsqr_returns_minimum_norm_solution_on_rank_deficient_system() {
        // Wide consistent system: LSQR from zero converges to A⁺b.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 9);
        let b = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let pinv = a.clone().pseudo_inverse(1e-14).unwrap();
        let oracle = pinv * &b;
        let y = lsqr_solve(&a, &b, 1e-14, 1e-14, 200).unwrap();
        assert!((&y - &oracle).norm() <= 1e-9 * oracle.norm());
    }

    #[test]
    fn lsqr_square_nonsingular_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 8, 8) + DMatrix::identity(8, 8) * 3.0;
            let b = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let oracle = a.clone().lu().solve(&b).unwrap();
            let y = lsqr_solve(&a, &b, 1e-14, 1e-14, 400).unwrap();
            assert!((&y - &oracle).norm() <= 1e-8 * oracle.norm());
        }
    }

    #[test]
    fn lsqr_damping_matches_ridge_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_matrix(&mut rng, 10, 6);
        let b = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let damp = 0.3;
        let mut opts = LsqrOptions::new(1e-14, 1e-14, 500);
        opts.damp = damp;
        let y = lsqr(&a, &b, &opts).unwrap().x;
        let lhs = a.transpose() * &a + DMatrix::identity(6, 6) * (damp * damp);
        let oracle = lhs.lu().solve(&(a.transpose() * &b)).unwrap();
        assert!((&y - &oracle).norm() <= 1e-9 * oracle.norm());
    }

    #[test]
    fn fn_operator_and_adjoint_wrapper() {
        let a = DMatrix::<f64>::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = a.transpose();
        let op = FnOperator::new(2, 3, move |v: &DVector<f64>| &a * v, move |u: &DVector<f64>| &at * u);
        let adj = Adjoint(&op);
        assert_eq!(adj.nrows(), 3);
        assert_eq!(to_dense(&adj), to_dense(&op).transpose());
    }

    #[test]
    fn eig_sorted_descending_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 6, 6);
        let s = &b + b.transpose();
        let e = sym_eig(&s);
        for i in 1..6 {
            assert!(e.eigenvalues[i - 1] >= e.eigenvalues[i]);
        }
        let vtv = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((vtv - DMatrix::identity(6, 6)).norm() < 1e-12);
        assert!((e.reconstruct() - &s).norm() <= 1e-10 * s.norm());
    }

    #[test]
    fn independent_rows_trivial() {
        let g = DMatrix::<f64>::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let rows = select_independent_rows(&g, 1e-8, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(select_independent_rows(&g, 1e-8, Some(2)).unwrap().len(), 2);
        assert!(select_independent_rows(&g, 1e-8, Some(2)).unwrap().contains(&2));
    }

    #[test]
    fn independent_rows_prefers_forced_row() {
        let g = DMatrix::<f64>::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(select_independent_rows(&g, 1e-8, None).unwrap(), vec![0, 1]);
        let rows = select_independent_rows(&g, 1e-8, Some(2)).unwrap();
        assert!(rows.contains(&2));
    }

    #[test]
    fn independent_rows_drops_near_duplicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_matrix(&mut rng, 3, 5);
        let perturb = random_matrix(&mut rng, 1, 5) * 1e-9;
        let mut g = DMatrix::zeros(4, 5);
        g.view_mut((0, 0), (3, 5)).copy_from(&base);
        let dup = base.row(1) + perturb.row(0);
        g.set_row(3, &dup);
        let rows = select_independent_rows(&g, 1e-6, None).unwrap();
        assert_eq!(rows.len(), 3);
        // SVD rank oracle at the same relative tolerance.
        let sv = g.clone().svd(false, false).singular_values;
        let rank = sv.iter().filter(|&&s| s > 1e-6 * sv[0]).count();
        assert_eq!(rank, rows.len());
    }

    #[test]
    fn independent_rows_errors() {
        let g = DMatrix::<f64>::zeros(2, 2);
        assert!(matches!(select_independent_rows(&g, 1e-8, None), Err(SymlinError::DegenerateInput(_))));
        let g = DMatrix::<f64>::identity(2, 2);
        assert!(matches!(select_independent_rows(&g, 0.0, None), Err(SymlinError::InvalidTolerance(_))));
    }

    #[test]
    fn independent_rows_singular_value_separation() {
        // Random low-rank matrices with a clear gap: the selected rows stay well
        // conditioned and adding any other row collapses the smallest singular value.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..20 {
            let rank = 2 + trial % 4;
            let left = random_matrix(&mut rng, 8, rank);
            let right = random_matrix(&mut rng, rank, 7);
            let g = left * right;
            let tol = 1e-8;
            let rows = select_independent_rows(&g, tol, None).unwrap();
            assert_eq!(rows.len(), rank);
            let gn = spectral_norm(&g);
            let sub = DMatrix::from_fn(rows.len(), 7, |i, j| g[(rows[i], j)]);
            let smin = sub.svd(false, false).singular_values.min();
            assert!(smin > tol * gn);
            for extra in (0..8).filter(|r| !rows.contains(r)) {
                let mut idx = rows.clone();
                idx.push(extra);
                let aug = DMatrix::from_fn(idx.len(), 7, |i, j| g[(idx[i], j)]);
                let s = aug.svd(false, false).singular_values.min();
                assert!(s < tol * gn);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dense_operator_adjoint_consistency(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, rows, cols);
            let u = DVector::from_fn(cols, |_, _| rng.random_range(-1.0..1.0));
            let v = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
            let lhs = a.apply(&u).dot(&v);
            let rhs = u.dot(&a.apply_adjoint(&v));
            let scale = a.norm() * u.norm() * v.norm();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1e-300));
        }

        #[test]
        fn eig_reconstruction(seed in any::<u64>(), n in 1usize..10, scale in 1e-3f64..1e5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_matrix(&mut rng, n, n) * scale;
            let s = &b + b.transpose();
            let e = sym_eig(&s);
            prop_assert!((e.reconstruct() - &s).norm() <= 1e-10 * s.norm().max(1e-300));
            let vtv = e.eigenvectors.transpose() * &e.eigenvectors;
            prop_assert!((vtv - DMatrix::identity(n, n)).norm() <= 1e-12);
        }
    }
}
