//! Physical quantities and cost formulas of one federated round: computation,
//! communication, latency, energy, the weighted objective, and precedence
//! feasibility between connected devices.
//!
//! All types are immutable after construction and all operations are pure
//! functions, so everything here is safe to evaluate concurrently.

mod channel;
mod cost;
mod scenario;

pub use channel::{link_rate, sample_channels, sample_channels_unit_fading, ChannelMatrix};
pub use cost::{
    check_precedence, comm_cost, comp_cost, round_cost, DeviceCost, RoundCost, Schedule,
    PRECEDENCE_TOLERANCE,
};
pub use scenario::{ConfigError, ScenarioConfig};

use thiserror::Error;

/// Errors from cost evaluation and channel sampling.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("nodes {0} and {1} share the same position; link distances are undefined")]
    DegenerateGeometry(usize, usize),
    #[error("computing speed {speed:.3e} outside [{f_min:.3e}, {f_max:.3e}] for device {device}")]
    SpeedOutOfBounds {
        device: usize,
        speed: f64,
        f_min: f64,
        f_max: f64,
    },
    #[error("device {0} has zero effective rate on its assigned link")]
    InfeasibleLink(usize),
    #[error("schedule shape mismatch: expected {expected} devices, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
