//! Differentiable distributed rainfall-runoff modelling and regionalization.
//!
//! The crate couples a gridded GR-like hydrological model with an exact
//! adjoint, descriptor-to-parameter mappings (bounded multilinear regression
//! and a multilayer perceptron), gradient-based and global optimizers, and a
//! Bayesian ensemble estimator for uniform first guesses.

// `!(x > 0.0)` is used on purpose so NaN fails validation; indexed loops
// mirror the per-parameter array layout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adjoint;
pub mod bayes;
pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod mapping;
pub mod model;
pub mod objective;
pub mod optim;
pub mod protocol;
pub mod setup;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{DescriptorStack, DrainagePlan, Gauge, GaugeSet};
pub use model::{Bounds, ForcingSeries, ParameterFields, StateFields};
pub use setup::Setup;
