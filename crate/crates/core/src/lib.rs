//! Core algorithms for simulation-based Bayesian inversion with neural
//! surrogates: a minimal dense-network engine with reverse-mode gradients,
//! a conditional RealNVP density estimator, an informed variational
//! autoencoder, Karhunen-Loeve random fields, a Darcy-flow forward model,
//! and a differential-evolution MCMC sampler.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats, and the CLI
//! live in the companion `neural-mcmc-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cnf;
pub mod darcy;
pub mod eigen;
pub mod field;
pub mod graph;
pub mod math;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod vae;

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A shape or dimension mismatch between operands.
    Shape(String),
    /// A violated precondition (invalid argument, empty input, ...).
    Contract(String),
    /// An iterative method failed to converge within its budget.
    Convergence(String),
    /// A non-finite value appeared where a finite one is required.
    Evaluation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Convergence(msg) => write!(f, "convergence error: {msg}"),
            Error::Evaluation(msg) => write!(f, "evaluation error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub use tensor::Tensor;
