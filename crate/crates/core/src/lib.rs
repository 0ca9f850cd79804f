//! A desk-scale Mixture-of-Experts laboratory.
//!
//! Routing with top-k renormalized scores, the auxiliary / orthogonality /
//! variance balance losses with exact gradients and a finite-difference
//! oracle, routing and clustering diagnostics, constructive checks of the
//! row-variance / column-balance compatibility result, and a seeded SGD
//! experiment runner with ablation presets.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod lemma;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod moe;

pub use error::{LabError, Result};
