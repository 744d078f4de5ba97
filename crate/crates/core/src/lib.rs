//! Sample-allocation optimization for approximate control variate (ACV)
//! estimators of a high-fidelity model's mean.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod model;
pub mod optimizer;
pub mod oracle;
pub mod orchestrator;
pub mod records;
pub mod recursion;
pub mod scenario;
pub mod strategies;

pub use error::{Error, Result};
