//! Certified global solutions of parameterized homogenized QCQPs and their
//! derivatives.
//!
//! The pipeline is: build a [`qcqp::HomQcqp`], relax it to an SDP
//! ([`sdp::build_shor_relaxation`]), solve with the built-in interior-point
//! method or inject an external solution, certify the rank-1 extraction
//! ([`certify`]), and backpropagate a loss gradient through the certified
//! solution ([`diff`]). [`autotight`] discovers redundant constraints when the
//! relaxation is not tight.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`, which is what the tolerance
//! defaults are tuned for.

pub mod autotight;
pub mod certify;
pub mod diff;
pub mod pipeline;
pub mod qcqp;
pub mod scalar;
pub mod sdp;
pub mod symlin;

pub use scalar::Real;

pub type Qcqp = qcqp::HomQcqp<f64>;
pub type SymMatrix = qcqp::ParamSymMatrix<f64>;
pub type Params = qcqp::VectorizedParams<f64>;
pub type Shor = sdp::ShorSdp<f64>;
pub type PrimalDual = sdp::SdpPrimalDual<f64>;
pub type Certified = certify::CertifiedSolution<f64>;
pub type Gradients = diff::GradientReport<f64>;
pub type Workspace = diff::KktWorkspace<f64>;
pub type Layer = pipeline::Layer<f64>;

pub type Qcqp32 = qcqp::HomQcqp<f32>;
pub type SymMatrix32 = qcqp::ParamSymMatrix<f32>;
pub type Shor32 = sdp::ShorSdp<f32>;
pub type PrimalDual32 = sdp::SdpPrimalDual<f32>;
