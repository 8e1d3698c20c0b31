//! Joint optimization of the gradient-aggregation topology and per-device
//! computing speeds for one round of federated edge learning.
//!
//! A round is modeled by [`model::ScenarioConfig`] (physical constants and
//! geometry), one fading realization [`model::ChannelMatrix`], and a
//! [`model::Schedule`] assigning every device a forwarding target plus a CPU
//! speed. The weighted energy + latency cost of a schedule is evaluated by
//! [`model::round_cost`].
//!
//! The crate provides three ways to produce schedules, plus the machinery to
//! compare them:
//!
//! - [`sca`]: a penalty-based successive convex approximation solver for the
//!   mixed-integer scheduling problem (the main optimizer),
//! - [`oracle`]: exhaustive enumeration for small device counts and the two
//!   flat-star baselines (fixed and speed-optimized),
//! - [`imitation`]: per-device neural networks trained offline on solver
//!   demonstrations for millisecond-scale online inference.
//!
//! [`sim`] executes the federated learning round structure itself (local
//! gradients, tree aggregation, global updates) so that schedule quality can
//! be measured in completed rounds and loss under a latency budget.
//! [`convex`] is the in-repo smooth convex solver backing every subproblem.

pub mod convex;
pub mod imitation;
pub mod model;
pub mod oracle;
pub mod sca;
pub mod sim;
pub mod topology;

pub use model::{ChannelMatrix, RoundCost, ScenarioConfig, Schedule};
pub use topology::Topology;
