//! Likelihood-free Bayesian inference with neural emulators.
//!
//! An ensemble of conditional density networks `q(x | θ)` is trained on
//! simulations whose parameters are chosen by an acquisition rule, then
//! used as a synthetic likelihood for Hamiltonian Monte Carlo.

pub mod acquisition;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod heads;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod simulators;
pub mod tensor;

pub use error::{Error, Result};
