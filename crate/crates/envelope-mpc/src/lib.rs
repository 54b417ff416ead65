//! Reference-free spatial-envelope model predictive planning and control for
//! high-performance ground vehicles.
//!
//! The crate bundles a smooth single-track vehicle model, conservative
//! drivable-corridor constraints built from p-norm blocks aggregated with a
//! LogSumExp, a direct-collocation OCP solved by a structured interior-point
//! method under a wall-clock budget, a corridor block planner, and a
//! closed-loop scenario simulator with a CLI.

pub mod config;
pub mod cost;
pub mod envelope;
pub mod nlp;
pub mod ocp;
pub mod track;
pub mod vehicle;

pub use vehicle::{ControlInput, VehicleParams, VehicleState};
