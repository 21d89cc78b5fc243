//! Simulation, identification, and certification of nonlinear state-space systems.
//!
//! The systems evolve as `h_{t+1} = φ(A·h_t + B·u_t)` where `φ` is an entrywise
//! activation with slopes confined to `[β, 1]` and the inputs `u_t` are i.i.d.
//! standard Gaussian. The crate provides
//!
//! * [`activation`] — the admissible activation family,
//! * [`simulator`] — trajectory generation, truncation, and sub-sampling,
//! * [`theory`] — closed-form scale/conditioning quantities and hyperparameter
//!   recipes, plus Monte-Carlo covariance certification,
//! * [`learner`] — the reparameterized regression dataset and constant-step SGD,
//! * [`verify`] — deterministic and statistical check batteries with uniform
//!   reporting,
//! * [`experiment`] — the multi-realization experiment harness,
//! * [`cli`] — the `nl-sysid` command-line front end.

pub mod activation;
pub mod cli;
pub mod experiment;
pub mod learner;
pub mod simulator;
pub mod theory;
pub mod verify;

use thiserror::Error;

/// Unified error type for fallible operations in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("need at least {need} samples, got {got}")]
    NotEnoughSamples { need: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
