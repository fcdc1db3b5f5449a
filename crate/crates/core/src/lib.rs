//! Search for near-optimal active-learning labeling orders and analyses of
//! how they compare with heuristic acquisition functions.

pub mod alcore;
pub mod analysis;
pub mod dataset;
pub mod dmr;
pub mod error;
pub mod heuristics;
pub mod learner;
pub mod rng;
pub mod sasearch;

pub use error::{Error, Result};
