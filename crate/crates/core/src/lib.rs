//! Tiered-hardness interactive learning.
//!
//! Hard instances are chosen by active learning (entropy or BADGE),
//! intermediate instances by per-class submodular mutual information with a
//! suggested label, and easy instances are auto-labeled from the model's most
//! confident predictions. Labeling cost is accounted with separate prices for
//! verifying a correct suggestion (`c_v`) and correcting a wrong one (`c_a`).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod service;
pub mod smi;
pub mod tier_select;

pub use error::{Error, Result};
