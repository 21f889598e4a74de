//! Distributed coordination of commercial building HVAC fleets that sell
//! demand response on a shared distribution feeder.
//!
//! Each building runs model predictive control over its own dynamics, inputs
//! and comfort band; the fleet couples only through a feeder voltage band on
//! the aggregate power injection. Splitting the band into per-building
//! shares turns the fleet problem into decoupled QPs tied together by one
//! zero-sum consensus constraint, which the coordination layer solves either
//! with a curvature-aware consensus method or with the sharing form of the
//! alternating direction method of multipliers. Both exchange two floats per
//! horizon step per building and iteration, nothing else.

pub mod aladin;
pub mod admm;
pub mod model;
pub mod mpc;
pub mod problem;
pub mod qp;
pub mod scenario;
pub mod trace;

pub use aladin::{AladinConfig, ConsensusState, Scaling, SigmaMode};
pub use admm::{AdmmConfig, AdmmState};
pub use model::{BuildingKind, BuildingModel, CondensedQp, ModelError};
pub use mpc::{EpisodeCase, MpcConfig, MpcEpisode, MpcError};
pub use problem::{CouplingData, LocalProblem, ProblemError};
pub use qp::{QpError, QpFactor, QpSolution};
pub use scenario::{Fleet, Scenario, ScenarioError};
pub use trace::{FleetSolution, SolveError, SolveTrace, SolverKind};
