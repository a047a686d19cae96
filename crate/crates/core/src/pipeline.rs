//! Solve, certify and differentiate in one call.

use nalgebra::DVector;
use thiserror::Error;

use crate::certify::{certify, CertifiedSolution, CertifyError, CertifyOptions, Verdict};
use crate::diff::{backprop, BackpropMethod, BackpropOptions, DiffError, GradientReport};
use crate::qcqp::HomQcqp;
use crate::scalar::Real;
use crate::sdp::{build_shor_relaxation, solve_sdp, SdpOptions, SdpPrimalDual, SdpResiduals, SdpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("SDP solver stopped with {status:?} after {iterations} iterations (primal {primal:.3e}, dual {dual:.3e}, gap {gap:.3e})")]
    SolverFailure { status: SdpStatus, iterations: usize, primal: f64, dual: f64, gap: f64 },
    #[error("relaxation is not certified tight: {verdict:?}, ratio {ratio:.3e}")]
    NotTight { verdict: Verdict, ratio: f64 },
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl PipelineError {
    fn solver<T: Real>(status: SdpStatus, iterations: usize, r: &SdpResiduals<T>) -> Self {
        Self::SolverFailure {
            status,
            iterations,
            primal: r.primal_infeas.to_f64_lossy(),
            dual: r.dual_infeas.to_f64_lossy(),
            gap: r.gap.to_f64_lossy(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward<T: Real> {
    pub sdp: SdpPrimalDual<T>,
    pub cert: CertifiedSolution<T>,
}

/// Options for a differentiable QCQP layer.
#[derive(Debug, Clone, Copy)]
pub struct Layer<T> {
    pub sdp: SdpOptions<T>,
    pub certify: CertifyOptions<T>,
    pub backprop: BackpropOptions<T>,
    pub method: BackpropMethod,
}

impl<T: Real> Default for Layer<T> {
    fn default() -> Self {
        Self {
            sdp: SdpOptions::default(),
            certify: CertifyOptions::default(),
            backprop: BackpropOptions::default(),
            method: BackpropMethod::Is,
        }
    }
}

impl<T: Real> Layer<T> {
    pub fn with_method(mut self, method: BackpropMethod) -> Self {
        self.method = method;
        self
    }

    /// Solves and certifies. Any verdict is returned; only solver failure is an error.
    pub fn solve(&self, q: &HomQcqp<T>) -> Result<Forward<T>, PipelineError> {
        let sdp = solve_sdp(&build_shor_relaxation(q), &self.sdp);
        if sdp.status != SdpStatus::Optimal {
            return Err(PipelineError::solver(sdp.status, sdp.iterations, &sdp.residuals));
        }
        let cert = certify(q, &sdp, &self.certify)?;
        Ok(Forward { sdp, cert })
    }

    /// Like [`Layer::solve`] but rejects anything other than `TightCertified`.
    pub fn forward(&self, q: &HomQcqp<T>) -> Result<Forward<T>, PipelineError> {
        let out = self.solve(q)?;
        if out.cert.verdict != Verdict::TightCertified {
            return Err(PipelineError::NotTight {
                verdict: out.cert.verdict,
                ratio: out.cert.tightness_ratio.to_f64_lossy(),
            });
        }
        Ok(out)
    }

    pub fn certified(&self, q: &HomQcqp<T>) -> Result<CertifiedSolution<T>, PipelineError> {
        self.solve(q).map(|f| f.cert)
    }

    pub fn backward(
        &self,
        q: &HomQcqp<T>,
        cert: &CertifiedSolution<T>,
        incoming: &DVector<T>,
    ) -> Result<GradientReport<T>, PipelineError> {
        Ok(backprop(q, cert, incoming, self.method, &self.backprop)?)
    }

    /// Forward pass followed by `dℓ/dθ` for the parameters attached to `q`.
    pub fn value_and_grad<L>(
        &self,
        q: &HomQcqp<T>,
        n_params: usize,
        loss_grad: L,
    ) -> Result<(Forward<T>, DVector<T>), PipelineError>
    where
        L: FnOnce(&DVector<T>) -> DVector<T>,
    {
        let fwd = self.forward(q)?;
        let g = loss_grad(&fwd.cert.x);
        let report = self.backward(q, &fwd.cert, &g)?;
        let grad = report.chain(q, n_params)?;
        Ok((fwd, grad))
    }
}
