//! Floating-point relative-error analysis of scaled cross-entropy gradients,
//! the optimal scale `t*`, and a PGD attack engine that uses it.

pub mod analysis;
pub mod attack;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod precision;
pub mod tstar;

pub use error::{Error, Result};
