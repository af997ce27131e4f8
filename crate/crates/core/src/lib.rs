//! Risk-aware safety filtering for particle-filter beliefs.
//!
//! A robot's belief is a particle set propagated through a controlled SDE.
//! Safety is expressed as a lower confidence bound on the CVaR of a state
//! barrier over the particles, and a small QP minimally modifies a reference
//! input so that this bound stays non-negative.

pub mod barrier;
pub mod error;
pub mod models;
pub mod particle_filter;
pub mod risk;
pub mod rng;
pub mod safety_filter;
pub mod sim;

pub use error::{Error, Result};
