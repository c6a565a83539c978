//! Moment-based variational smoothing and inference for latent Itô diffusions.
//!
//! The library approximates the posterior of a diffusion process observed
//! through sparse Gaussian measurements by a controlled version of the prior
//! process. Projecting onto first and second moments and closing the moment
//! hierarchy turns smoothing into a deterministic optimal control problem,
//! which is solved by natural gradient descent over piecewise-constant
//! control paths.
//!
//! Module overview:
//!
//! - [`ode`]: fixed-step RK4 integration on a shared grid, forward and
//!   backward, with instantaneous resets at marked nodes.
//! - [`closure`]: multivariate normal and log-normal moment closures.
//! - [`models`]: prior SDE families (linear, double-well, geometric Brownian
//!   motion, chemical Langevin) exposing closed-moment expectations and
//!   analytic Jacobians.
//! - [`variational`]: controlled moment dynamics, path-KL cost and Fisher
//!   blocks, observation factors, adjoint equation and gradients.
//! - [`optimize`]: robust natural gradient descent, online smoothing and
//!   alternating gradient descent for joint parameter inference.
//! - [`sample`]: Euler-Maruyama simulation, empirical moments and the exact
//!   continuous-discrete linear-Gaussian smoother used as a reference.
//! - [`amortize`]: a small feed-forward network mapping observations to
//!   controls, trained through the adjoint-based control gradient.

use std::fmt;

pub mod amortize;
pub mod closure;
pub mod la;
pub mod models;
pub mod ode;
pub mod optimize;
pub mod sample;
pub mod variational;

/// Errors shared across the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An ODE state picked up a NaN or infinity (closure blow-up or a step
    /// size too large for the dynamics).
    NonFiniteState { step: usize, t: f64 },
    /// Moment order above the supported bound.
    UnsupportedOrder { order: usize, max: usize },
    /// Input outside the mathematical domain of an operation.
    Domain(String),
    /// Identity rescaling requested with a non-invertible constant diffusion.
    SingularDiffusion,
    /// Inconsistent dimensions between inputs.
    Dimension(String),
    /// A robust descent loop made no progress (consecutive rejections).
    NoProgress { phase: &'static str, rejections: usize },
    /// A simulated path became non-finite.
    NonFinitePath { path: usize, step: usize },
    /// Training loss or gradient became non-finite.
    NonFiniteLoss { epoch: usize, sample: usize },
    /// Invalid configuration or input data.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFiniteState { step, t } => {
                write!(f, "non-finite ODE state at step {step} (t = {t})")
            }
            Error::UnsupportedOrder { order, max } => {
                write!(f, "moment order {order} exceeds supported bound {max}")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::SingularDiffusion => write!(f, "constant diffusion tensor is singular"),
            Error::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::NoProgress { phase, rejections } => {
                write!(f, "no progress in {phase} after {rejections} consecutive rejections")
            }
            Error::NonFinitePath { path, step } => {
                write!(f, "non-finite sample path {path} at step {step}")
            }
            Error::NonFiniteLoss { epoch, sample } => {
                write!(f, "non-finite training loss at epoch {epoch}, sample {sample}")
            }
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
