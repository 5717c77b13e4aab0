//! Asymptotic error analysis and optimal noise design for noise-contrastive
//! estimation on Gaussian toy models.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
#[cfg(feature = "cli")]
pub mod cli;
pub mod bregman;
pub mod densities;
pub mod divergence;
pub mod empirical;
pub mod error;
pub mod integrate;
pub mod noisedesign;
pub mod optim;
pub mod par;
pub mod partition;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
