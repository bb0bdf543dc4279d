//! Multiclass processor-sharing queue with probabilistic feedback:
//! event-driven simulation, fluid-model numerics, and the heavy-traffic
//! diffusion limit objects, plus a harness that checks the limit
//! statements at desk scale.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod fixtures;
pub mod fluid;
pub mod gridconv;
pub mod harness;
pub mod simulator;
pub mod measures;
pub mod model;
pub mod report;

pub use error::{Error, Result};
