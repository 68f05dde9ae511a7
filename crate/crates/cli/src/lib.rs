//! Experiment orchestration for the unlearning library: config parsing,
//! the generate → train → unlearn → evaluate pipeline, multi-trial
//! aggregation, and result export. The `uib` binary is a thin wrapper over
//! these modules.

// `!(x > 0.0)` is deliberate in validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod report;
