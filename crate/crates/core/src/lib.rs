//! Zeroth-order cooperative optimization over a delayed broadcast network.
//!
//! Each of `n` agents controls a block of a joint decision vector and can only
//! query the value of its own local cost. Agents estimate directional
//! derivatives from two symmetric function evaluations, share those scalars
//! over a network with bounded delay, and descend along partial gradient
//! estimates with diminishing step size and smoothing radius.
//!
//! Modules, bottom up:
//!
//! - [`schedule`]: step-size and smoothing sequences;
//! - [`problem`]: local cost suite, including a wind-farm wake model;
//! - [`delaynet`]: delayed broadcast medium and peer tables;
//! - [`agent`]: perturbations, two-point derivative, partial gradient, update;
//! - [`engine`]: synchronous rounds, trials and experiments;
//! - [`metrics`]: convergence summaries and CSV persistence;
//! - [`config`]: JSON experiment files;
//! - [`checks`]: Monte-Carlo and exhaustive self-checks.

pub mod agent;
pub mod checks;
pub mod config;
pub mod delaynet;
pub mod engine;
pub mod metrics;
pub mod problem;
pub mod rng;
pub mod schedule;

pub use agent::{two_point_derivative, AgentError, AgentState, PerturbationBuffer};
pub use config::{load_experiment, ConfigError, ExperimentConfig};
pub use delaynet::{update_peer_table, DelayModel, DerivativeBroadcast, Medium, PeerEntry, PeerTable};
pub use engine::{run_experiment, run_trial, RoundTrace, RunOptions, TrialResult, TrialStatus, World};
pub use metrics::{compute_summary, export_csv, ConvergenceSummary, RoundMetrics};
pub use problem::{JointDecision, Partition, Problem, ProblemMeta, WindFarm, WindFarmParams};
pub use schedule::{predicted_rate_regime, validate_schedule_pair, RateRegime, Schedule, SchedulePair};
