//! Adversarial missingness attacks against GLM modelers.
//!
//! The crate learns a missingness mechanism that hides entries of a
//! complete dataset so that a modeler who remediates the gaps with
//! complete-case analysis, mean imputation or regression imputation fits a
//! GLM close to adversary-chosen coefficients. It also simulates the
//! modeler and evaluates data-valuation defenses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod glm;
pub mod mechanism;
pub mod surrogate;
pub mod victim;

pub use error::{Error, Result};
