//! Lane-based cumulative arrival curve reconstruction at a signalized
//! intersection from partially matched license plate recognition (LPR) data.
//!
//! A Bayesian feedforward learner maps upstream link arrivals, time in cycle
//! and estimation span to lane arrival accumulations, with epistemic and
//! aleatoric variance. Reconstruction runs in historical mode (between two
//! matched vehicles, boundary scaled) or real-time mode (beyond the newest
//! matched vehicle). A corridor simulator supplies ground truth.

pub mod bacl;
pub mod config;
pub mod curve;
pub mod error;
pub mod experiment;
pub mod features;
pub mod io;
pub mod metrics;
pub mod reconstruct;
pub mod seed;
pub mod simulator;

pub use error::{Error, Result};
