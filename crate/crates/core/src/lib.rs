//! Training and inference toolkit for a password-conditioned face identity
//! transformer: a single conditional generator that anonymizes a face under an
//! N-bit password, recovers the original face under the inverse password, and
//! emits a decoy identity under any other password. Ships with the auxiliary
//! networks, multi-task losses, replay-buffer training loop, classical
//! anonymization baselines, and the evaluation metrics needed to compare them.
//!
//! Everything runs on a small built-in autodiff engine over `ndarray`, so the
//! whole stack is self-contained and deterministic under a fixed seed.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod password;
pub mod pipeline;
pub mod synthface;
pub mod trainer;

pub use error::{Error, Result};
pub use password::Password;
