//! Micro-randomized trial protocol engine, deterministic fault-injecting
//! simulator and analysis dataset pipeline.

pub mod agents;
pub mod availability;
pub mod audit;
pub mod error;
pub mod estimator;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod sync;
pub mod time;

pub use error::{Error, Result};

/// Estimates in double precision; the estimator itself is generic over the scalar.
pub type EffectEstimate = estimator::EffectEstimate<f64>;
pub type Term = estimator::Term<f64>;
pub type Matrix = estimator::linalg::Matrix<f64>;
