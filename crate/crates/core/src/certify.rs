//! Rank-1 extraction, tightness test and global-optimality certificate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qcqp::HomQcqp;
use crate::scalar::Real;
use crate::sdp::SdpPrimalDual;
use crate::symlin::{frob_dot, spectral_norm, sym_eig, sym_eigenvalues};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("homogenizing entry of the leading eigenvector is {0:e}")]
    HomogeneousEntryZero(f64),
    #[error("objective ⟨Q, X⟩ is zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions<T> {
    pub ratio_threshold: T,
    pub psd_tol: T,
    pub stat_tol: T,
    pub corank_gap: T,
}

impl<T: Real> Default for CertifyOptions<T> {
    fn default() -> Self {
        Self { ratio_threshold: T::lit(1e5), psd_tol: T::lit(1e-7), stat_tol: T::lit(1e-6), corank_gap: T::lit(1e-6) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    TightCertified,
    TightUncertified,
    NotTight,
}

const HOMOG_ZERO: f64 = 1e-8;
const RATIO_FLOOR: f64 = 1e-300;

/// `λ₁(X) / λ₂(X)`, or `+∞` when `λ₂ ≤ 1e-300`.
pub fn tightness_ratio<T: Real>(x: &DMatrix<T>) -> Result<T, CertifyError> {
    if !x.is_square() || x.nrows() < 2 {
        return Err(CertifyError::DimensionMismatch { expected: 2, found: x.nrows().min(x.ncols()) });
    }
    let ev = sym_eigenvalues(x);
    let mut v: Vec<T> = ev.iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if v[1] <= T::lit(RATIO_FLOOR) {
        return Ok(T::max_value().unwrap_or_else(T::one));
    }
    Ok(v[0] / v[1])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rank1<T: Real> {
    /// Leading factor with `x_h = 1`.
    Tight {
        x: DVector<T>,
        ratio: T,
    },
    NotTight {
        ratio: T,
        x_mat: DMatrix<T>,
    },
}

/// Leading factor `√λ₁ v₁` of `X`, sign-fixed and rescaled so that `x_h = 1`.
pub fn leading_factor<T: Real>(x: &DMatrix<T>, homog_index: usize) -> Result<DVector<T>, CertifyError> {
    let n = x.nrows();
    if !x.is_square() || homog_index >= n {
        return Err(CertifyError::DimensionMismatch { expected: n, found: homog_index });
    }
    let eig = sym_eig(x);
    let mut v: DVector<T> = eig.eigenvectors.column(0) * eig.eigenvalues[0].max(T::zero()).sqrt();
    let xh = v[homog_index];
    if xh.abs() < T::lit(HOMOG_ZERO) {
        return Err(CertifyError::HomogeneousEntryZero(xh.to_f64_lossy()));
    }
    if xh < T::zero() {
        v = -v;
    }
    let scale = v[homog_index];
    v /= scale;
    v[homog_index] = T::one();
    Ok(v)
}

pub fn extract_rank1<T: Real>(
    x: &DMatrix<T>,
    homog_index: usize,
    ratio_threshold: T,
) -> Result<Rank1<T>, CertifyError> {
    let ratio = tightness_ratio(x)?;
    if ratio < ratio_threshold {
        return Ok(Rank1::NotTight { ratio, x_mat: x.clone() });
    }
    Ok(Rank1::Tight { x: leading_factor(x, homog_index)?, ratio })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateFlags<T> {
    pub psd_ok: bool,
    pub stationarity_ok: bool,
    pub corank1_ok: bool,
    pub min_eig: T,
    pub second_eig: T,
    pub stationarity_residual: T,
}

pub fn certificate_check<T: Real>(
    h: &DMatrix<T>,
    x: &DVector<T>,
    tols: &CertifyOptions<T>,
) -> Result<CertificateFlags<T>, CertifyError> {
    let n = h.nrows();
    if !h.is_square() || x.len() != n {
        return Err(CertifyError::DimensionMismatch { expected: n, found: x.len() });
    }
    let mut ev: Vec<T> = sym_eigenvalues(h).iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let hnorm2 = spectral_norm(h);
    let one = T::one();
    let min_eig = ev[0];
    let second_eig = if n >= 2 { ev[1] } else { T::max_value().unwrap_or(one) };
    let stationarity_residual = (h * x).norm();
    Ok(CertificateFlags {
        psd_ok: min_eig >= -tols.psd_tol * (one + hnorm2),
        stationarity_ok: stationarity_residual <= tols.stat_tol * (one + h.norm()),
        corank1_ok: second_eig >= tols.corank_gap * hnorm2 && min_eig.abs() <= tols.psd_tol * (one + hnorm2),
        min_eig,
        second_eig,
        stationarity_residual,
    })
}

/// `μ = ⟨Q, x̂x̂ᵀ − X⟩ / ⟨Q, X⟩`.
pub fn suboptimality_gap<T: Real>(q: &DMatrix<T>, x_hat: &DVector<T>, x: &DMatrix<T>) -> Result<T, CertifyError> {
    let n = q.nrows();
    if x_hat.len() != n || x.nrows() != n {
        return Err(CertifyError::DimensionMismatch { expected: n, found: x_hat.len() });
    }
    let denom = frob_dot(q, x);
    if denom == T::zero() {
        return Err(CertifyError::DivisionByZero);
    }
    Ok((x_hat.dot(&(q * x_hat)) - denom) / denom)
}

/// Outcome of certifying an SDP solution for a QCQP.
#[derive(Debug, Clone)]
pub struct CertifiedSolution<T: Real> {
    /// Extracted QCQP solution with `x_h = 1`. For `NotTight` this is the
    /// normalized leading factor, which is generally infeasible.
    pub x: DVector<T>,
    /// `(λ_1, …, λ_m, λ_0)` as supplied by the SDP bundle.
    pub lambda: DVector<T>,
    pub h: DMatrix<T>,
    pub tightness_ratio: T,
    pub certificate_min_eig: T,
    pub certificate_second_eig: T,
    pub stationarity_residual: T,
    pub corank1: bool,
    pub verdict: Verdict,
    /// `xᵀQx` at the extracted point.
    pub objective: T,
    /// `⟨Q, X⟩`, the relaxation's lower bound.
    pub relaxation_value: T,
}

impl<T: Real> CertifiedSolution<T> {
    pub fn is_certified(&self) -> bool {
        self.verdict == Verdict::TightCertified
    }
}

/// Judges tightness on the interior-point matrix `sol.raw_x`, extracts `x`
/// from `sol.x`, and checks the certificate `sol.h` at `x`.
pub fn certify<T: Real>(
    q: &HomQcqp<T>,
    sol: &SdpPrimalDual<T>,
    opts: &CertifyOptions<T>,
) -> Result<CertifiedSolution<T>, CertifyError> {
    let h_idx = q.homog_index();
    if sol.x.nrows() != q.n() {
        return Err(CertifyError::DimensionMismatch { expected: q.n(), found: sol.x.nrows() });
    }
    let ratio = if q.n() >= 2 { tightness_ratio(&sol.raw_x)? } else { T::max_value().unwrap_or_else(T::one) };
    let x = leading_factor(&sol.x, h_idx)?;
    let flags = certificate_check(&sol.h, &x, opts)?;
    let verdict = if ratio < opts.ratio_threshold {
        Verdict::NotTight
    } else if flags.psd_ok && flags.stationarity_ok {
        Verdict::TightCertified
    } else {
        Verdict::TightUncertified
    };
    log::debug!(
        "certify: ratio={:.3e} min_eig={:.3e} second_eig={:.3e} ‖Hx‖={:.3e} verdict={verdict:?}",
        ratio.to_f64_lossy(),
        flags.min_eig.to_f64_lossy(),
        flags.second_eig.to_f64_lossy(),
        flags.stationarity_residual.to_f64_lossy()
    );
    Ok(CertifiedSolution {
        objective: x.dot(&(q.q() * &x)),
        relaxation_value: frob_dot(q.q(), &sol.raw_x),
        x,
        lambda: sol.lambda.clone(),
        h: sol.h.clone(),
        tightness_ratio: ratio,
        certificate_min_eig: flags.min_eig,
        certificate_second_eig: flags.second_eig,
        stationarity_residual: flags.stationarity_residual,
        corank1: flags.corank1_ok,
        verdict,
    })
}

/// A feasible point recovered from a non-tight relaxation, with its gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Rounded<T: Real> {
    pub x: DVector<T>,
    pub gap: T,
}

/// Applies a problem-specific rounding to a non-tight `X` and reports the
/// suboptimality gap of the rounded point.
pub fn round_and_bound<T: Real, F>(q: &HomQcqp<T>, x_mat: &DMatrix<T>, rounding: F) -> Result<Rounded<T>, CertifyError>
where
    F: FnOnce(&DMatrix<T>) -> DVector<T>,
{
    let x = rounding(x_mat);
    let gap = suboptimality_gap(q.q(), &x, x_mat)?;
    Ok(Rounded { x, gap })
}
