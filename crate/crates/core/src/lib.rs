//! Closed-form knowledge editing for Mixture-of-Experts down-projections.
//!
//! The crate covers a synthetic MoE layer model, dense linear algebra kernels,
//! Tucker factor extraction, the single-layer edit solvers, multi-layer spread
//! orchestration, and the benchmark / verification harness behind the CLI.

pub mod editors;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod moe;
pub mod spread;
pub mod timing;
pub mod tucker;

pub use error::{Error, Result};
