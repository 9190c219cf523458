//! Deterministic simulator for federated prototype learning with textual
//! semantic prototypes, together with the prototype-based baselines it is
//! compared against.

pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod text;
pub mod vision;

pub use error::{Error, Result};
