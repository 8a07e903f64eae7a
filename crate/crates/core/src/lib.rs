//! Federated conformal prediction under label shift.
//!
//! Calibration data is spread over several agents whose label priors differ
//! from a target agent's. Scores are reweighted by label likelihood ratios,
//! and the per-label quantile is either computed exactly or estimated by a
//! differentially private federated optimizer on a smoothed pinball loss.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod error;
pub mod fedopt;
pub mod harness;
pub mod labelshift;
pub mod moreau;
pub mod privacy;
pub mod scores;
pub mod weighted_dist;

pub use error::{Error, Result};
