//! Online safety-embedded critic learning for uncertain control-affine
//! systems.
//!
//! The crate simulates a closed loop in which an online critic approximates
//! the constrained optimal value function with state-following kernels, a
//! filtered-regressor identifier estimates the unknown drift parameters, and
//! a robust control-barrier-function margin keeps the trajectory inside the
//! safe set via a closed-form Lagrange multiplier. Control recomputation is
//! either time-triggered on the integration grid or self-triggered through
//! dual stability/safety thresholds frozen at each sampling instant.
//!
//! Entry points: [`sim::ExperimentConfig`] describes an experiment (two
//! presets are built in), [`sim::run`] executes one, [`sim::compare`] runs an
//! ablation family, and [`report`] serializes results to CSV/JSON.

pub mod critic;
pub mod dynamics;
pub mod error;
pub mod identifier;
pub mod report;
pub mod safety;
pub mod sim;
pub mod trigger;

pub use error::{Result, SimError};
