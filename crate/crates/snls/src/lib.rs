//! Spectral Galerkin simulator and coupling laboratory for the weakly damped
//! stochastic nonlinear Schrödinger equation
//!
//!   du = -iAu dt + iλ|u|^{2σ}u dt - αu dt + b dW,   x ∈ [0,1],  u(·,0) = u(·,1) = 0,
//!
//! truncated to the first M Dirichlet sine modes.  The crate provides
//!
//! - the sine eigenbasis, projectors, norms and the pseudo-spectral
//!   nonlinearity ([`spectral`]),
//! - the diagonal noise operator and reproducible Wiener increments ([`noise`]),
//! - energy/Lyapunov functionals H*, H, E_{u,k} and the Foias–Prodi quadratic
//!   forms J, J_FP ([`energy`]),
//! - a Strang-splitting integrator and the low→high reconstruction map Φ
//!   ([`integrator`]),
//! - maximal couplings, Girsanov path densities, the binding control and the
//!   cycle-based coupling chain ([`coupling`]),
//! - Monte Carlo estimators for dissipation, small-ball entry, contraction and
//!   mixing ([`estimators`]),
//! - experiment configuration and result emission for the `snls` binary
//!   ([`config`], [`cli`]).

pub mod cli;
pub mod config;
pub mod coupling;
pub mod energy;
pub mod estimators;
pub mod integrator;
pub mod noise;
pub mod spectral;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("trajectory blew up at step {step}: {detail}")]
    BlowUp { step: usize, detail: String },
    #[error("residual sampling failed after {attempts} attempts (near-singular densities)")]
    ResidualSampling { attempts: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
