//! Fairness-aware supervised contrastive learning for debiasing text
//! classifiers, with INLP and adversarial baselines and the usual fairness
//! metrics.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod network;
pub mod numkit;
mod par;
pub mod rng;
pub mod trainers;

pub use error::{Error, Result};
