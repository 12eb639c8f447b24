//! Continual-learning toolkit built around a semi-parametric memory:
//! per-sample latent "memory cues" compressed with a learned entropy model
//! and a range coder, per-task pattern-completion decoders, and a
//! wake/sleep consolidation loop, plus reference baselines and an
//! evaluation harness for accuracy, robustness, reliability and fairness.

pub mod baselines;
pub mod codec;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod learner;
pub mod memory;
pub mod rng;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
