//! Fairness testing and mitigation for binary classifiers on tabular data.
//!
//! A test set is split by propensity score matching into a matched part,
//! where privileged and unprivileged rows are paired on near-identical
//! scores, and an unmatched remainder. Fairness metrics are audited on
//! each part, and FairMatch shifts per-group decision thresholds on the
//! unmatched rows only.

pub mod dataio;
pub mod error;
pub mod fairmatch;
pub mod fairtest;
pub mod harness;
pub mod learners;
pub mod matrix;
pub mod metrics;
pub mod psm;
pub mod rng;
pub mod sampling;
pub mod stats;

pub use error::{Error, Result};

/// Crate version recorded in result provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
