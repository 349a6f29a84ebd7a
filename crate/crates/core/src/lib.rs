//! Sequence models of ductile damage along non-proportional strain paths,
//! with a from-scratch autodiff core, Bayesian tuning and a prefix-causality
//! audit.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod autograd;
pub mod dataset;
pub mod deformation;
pub mod error;
pub mod hpo;
pub mod models;
pub mod training;

pub use error::{Error, Result};
