//! Machine unlearning of systematic feature/label patterns and random data
//! points from small differentiable classifiers.
//!
//! The crate is organized around six modules:
//!
//! - [`numerics`]: dense vectors/matrices, a deterministic PRNG, a matrix-free
//!   conjugate-gradient solver, and finite-difference oracles used by tests.
//! - [`model`]: multinomial logistic regression and a one-hidden-layer tanh
//!   MLP with analytic loss/gradient, Pearlmutter Hessian-vector products,
//!   Fisher diagonal, and SGD training.
//! - [`data`]: synthetic biased-dataset generation, pattern-point assembly,
//!   unlearn requests, IDX parsing, and splits.
//! - [`unlearn`]: the unlearning engine — influence functions, inverse-HVP
//!   solvers (LiSSA and CG), the information-bottleneck regularization step,
//!   parameter samplers, the iterative UIB-IF procedure, and baselines.
//! - [`bounds`]: variational bound machinery — Gaussian KL terms, the
//!   per-layer upper-bound aggregate, predictive lower bound, and exact
//!   discrete mutual-information oracles.
//! - [`metrics`]: evaluation — RIP, membership-inference efficacy, bias
//!   correlation (Cramér's V), macro-F1, and unlearning-time bookkeeping.

// Index loops are clearer than iterator chains in the matrix/vector kernels.
#![allow(clippy::needless_range_loop)]
// `!(x > 0.0)` is deliberate in validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod unlearn;
