//! Selective prediction toolkit.
//!
//! Reads prediction logs produced by an upstream classifier, turns a held-out
//! slice of them into calibration targets, trains a confidence model on those
//! targets and evaluates the result with risk-coverage analysis and
//! accuracy-pinned abstention thresholds.
//!
//! The pipeline, in module order:
//!
//! - [`predlog`]: log format, validation and held-out splitting.
//! - [`annotation`]: binary correctness labels and degree-of-correctness scores.
//! - [`features`]: fixed-layout feature vectors and the softmax contract.
//! - [`forest`], [`neural`], [`rejection`]: the learners behind calibrators.
//! - [`calibrator`]: the uniform `score(record) -> [0, 1]` surface.
//! - [`metrics`]: coverage, risk, AUC, threshold selection and abstention.
//! - [`pipeline`]: orchestration used by the `selcal` binary.

pub mod annotation;
pub mod calibrator;
pub mod error;
pub mod features;
pub mod forest;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod predlog;
pub mod rejection;
pub mod synthetic;

pub use error::{Error, Result};
