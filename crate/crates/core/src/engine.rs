//! Round-based orchestration.
//!
//! One round `t` runs five synchronous phases:
//!
//! 1. every agent draws `z^i(t)`;
//! 2. all local costs are observed at `x(t) + u(t) z(t)` and `x(t) - u(t) z(t)`;
//! 3. every agent forms `D_i(t)` and posts it;
//! 4. due broadcasts are delivered and peer tables updated;
//! 5. every agent assembles `g^i(t)` and steps `x^i <- x^i - eta(t) g^i(t)`.
//!
//! Metrics are taken at `x(t)`, before phase 5.

use std::sync::Arc;

use thiserror::Error;

use crate::agent::{two_point_derivative, AgentError, AgentState};
use crate::config::ExperimentConfig;
use crate::delaynet::{DelayError, DelayModel, DerivativeBroadcast, Medium};
use crate::metrics::{RoundMetrics, TraceStats};
use crate::problem::{JointDecision, Problem, ProblemError};
use crate::rng::{stream, StreamPurpose};
use crate::schedule::SchedulePair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("round {got} requested but the world is at round {expected}")]
    RoundOutOfSync { expected: u64, got: u64 },
}

/// Everything needed to recompute one round's estimator by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub t: u64,
    /// `x(t)` before the update.
    pub x: Vec<f64>,
    /// `z^i(t)` per agent.
    pub z: Vec<Vec<f64>>,
    /// `D_i(t)` per agent.
    pub derivative: Vec<f64>,
    /// `tau[i][j]`: freshest round of `D_j` held by agent `i` after delivery.
    pub tau: Vec<Vec<i64>>,
    /// `g^i(t)` per agent.
    pub g: Vec<Vec<f64>>,
}

pub struct World {
    problem: Arc<Problem>,
    schedules: SchedulePair,
    agents: Vec<AgentState>,
    medium: Medium,
    bound: u64,
    round: u64,
    floor: f64,
    trace: Option<Vec<RoundTrace>>,
    x: Vec<f64>,
    shifted: Vec<f64>,
    f_plus: Vec<f64>,
    f_minus: Vec<f64>,
}

/// RNG seeds for one trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialSeeds {
    pub master: u64,
    pub trial: u64,
    /// Overrides `master` for the delay stream only.
    pub delay: Option<u64>,
}

impl World {
    pub fn new(
        problem: Arc<Problem>,
        schedules: SchedulePair,
        delay: DelayModel,
        x0: Vec<f64>,
        seeds: TrialSeeds,
        smoothing_floor: f64,
    ) -> Result<Self, EngineError> {
        let partition = problem.partition().clone();
        if x0.len() != partition.total() {
            return Err(ProblemError::DimensionMismatch {
                expected: partition.total(),
                got: x0.len(),
            }
            .into());
        }
        let n = partition.n();
        let bound = delay.bound();
        let agents = (0..n)
            .map(|i| {
                let rng = stream(seeds.master, seeds.trial, StreamPurpose::Perturbation, i as u32);
                AgentState::new(i, x0[partition.range(i)].to_vec(), n, bound, rng)
            })
            .collect();
        let delay_rng = stream(
            seeds.delay.unwrap_or(seeds.master),
            seeds.trial,
            StreamPurpose::Delay,
            0,
        );
        let medium = Medium::new(n, delay, delay_rng)?;
        let d = partition.total();
        Ok(World {
            problem,
            schedules,
            agents,
            medium,
            bound,
            round: 0,
            floor: smoothing_floor,
            trace: None,
            x: x0,
            shifted: vec![0.0; d],
            f_plus: vec![0.0; n],
            f_minus: vec![0.0; n],
        })
    }

    pub fn from_config(config: &ExperimentConfig, trial: u64) -> Result<Self, EngineError> {
        World::new(
            config.problem.clone(),
            config.schedules,
            config.delay.clone(),
            config.initial_point(trial),
            TrialSeeds {
                master: config.seed,
                trial,
                delay: config.delay_seed,
            },
            config.smoothing_floor,
        )
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn with_delivery_trace(mut self) -> Self {
        self.medium.enable_trace();
        self
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn trace(&self) -> Option<&[RoundTrace]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<RoundTrace>> {
        self.trace.take()
    }

    /// Current joint decision `x(t)`.
    pub fn decision(&self) -> &[f64] {
        &self.x
    }

    pub fn joint_decision(&self) -> JointDecision {
        JointDecision::from_flat(self.problem.partition().clone(), self.x.clone()).unwrap()
    }

    pub fn step_round(&mut self, t: u64) -> Result<RoundMetrics, EngineError> {
        if t != self.round {
            return Err(EngineError::RoundOutOfSync {
                expected: self.round,
                got: t,
            });
        }
        let partition = self.problem.partition().clone();
        let n = partition.n();
        let u = self.schedules.u(t);
        let eta = self.schedules.eta(t);

        // 1. perturbations
        let mut z_flat = vec![0.0; partition.total()];
        for agent in self.agents.iter_mut() {
            let range = partition.range(agent.index());
            let z = agent.draw_perturbation(t)?;
            z_flat[range].copy_from_slice(z);
        }

        // 2. two observations per agent at the jointly perturbed points
        for ((s, x), z) in self.shifted.iter_mut().zip(&self.x).zip(&z_flat) {
            *s = x + u * z;
        }
        self.problem.evaluate_all_flat(&self.shifted, &mut self.f_plus)?;
        for ((s, x), z) in self.shifted.iter_mut().zip(&self.x).zip(&z_flat) {
            *s = x - u * z;
        }
        self.problem.evaluate_all_flat(&self.shifted, &mut self.f_minus)?;

        // 3. derivatives on the wire
        let mut derivatives = Vec::with_capacity(n);
        for i in 0..n {
            let value = two_point_derivative(self.f_plus[i], self.f_minus[i], u, self.floor)?;
            derivatives.push(value);
            self.medium.post(
                DerivativeBroadcast {
                    sender: i,
                    timestamp: t,
                    value,
                },
                t,
            )?;
        }

        // 4. delivery
        for agent in self.agents.iter_mut() {
            let arrivals = self.medium.deliver(agent.index(), t);
            agent.receive(&arrivals);
        }

        let metrics = self.measure(t, eta, u)?;

        // 5. estimator and update
        let mut gradients = Vec::with_capacity(n);
        for agent in self.agents.iter() {
            gradients.push(agent.assemble_partial_gradient(n)?);
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(RoundTrace {
                t,
                x: self.x.clone(),
                z: (0..n).map(|i| z_flat[partition.range(i)].to_vec()).collect(),
                derivative: derivatives,
                tau: self
                    .agents
                    .iter()
                    .map(|a| a.peers().entries().iter().map(|e| e.timestamp).collect())
                    .collect(),
                g: gradients.clone(),
            });
        }
        for (agent, g) in self.agents.iter_mut().zip(&gradients) {
            agent.apply_update(g, eta)?;
            self.x[partition.range(agent.index())].copy_from_slice(agent.block());
        }
        self.round += 1;
        Ok(metrics)
    }

    fn measure(&self, t: u64, eta: f64, u: f64) -> Result<RoundMetrics, EngineError> {
        let f_value = self.problem.evaluate_global_flat(&self.x)?;
        let grad_sq_norm = self
            .problem
            .gradient_oracle_flat(&self.x)?
            .map(|g| g.iter().map(|v| v * v).sum::<f64>());
        let mut max_staleness = 0u64;
        for agent in &self.agents {
            for entry in agent.peers().entries() {
                // an empty entry counts as t + 1 rounds stale
                let stale = (t as i64 - entry.timestamp) as u64;
                max_staleness = max_staleness.max(stale);
            }
        }
        Ok(RoundMetrics {
            t,
            f_value,
            grad_sq_norm,
            eta,
            u,
            p_sq: self.schedules.delayed_step_energy(t, self.bound),
            normalized_objective: self.problem.normalized_objective(f_value),
            max_staleness: Some(max_staleness),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Completed,
    AbortedNonFinite { round: u64, detail: String },
    AbortedBufferMiss { round: u64, detail: String },
    AbortedOther { round: u64, detail: String },
}

impl TrialStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, TrialStatus::Completed)
    }

    fn from_error(round: u64, err: EngineError) -> Self {
        let detail = err.to_string();
        match err {
            EngineError::Agent(AgentError::NonFiniteUpdate { .. }) => TrialStatus::AbortedNonFinite { round, detail },
            EngineError::Agent(AgentError::BufferMiss { .. }) => TrialStatus::AbortedBufferMiss { round, detail },
            _ => TrialStatus::AbortedOther { round, detail },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: u64,
    pub metrics: Vec<RoundMetrics>,
    pub final_decision: JointDecision,
    pub status: TrialStatus,
    pub delay_bound: u64,
    pub trace: Option<Vec<RoundTrace>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep a [`RoundTrace`] per round.
    pub trace: bool,
    /// Cap on worker threads for trials; `None` lets rayon decide.
    pub threads: Option<usize>,
}

pub fn run_trial(config: &ExperimentConfig, trial: u64, options: RunOptions) -> TrialResult {
    let delay_bound = config.delay_bound();
    let mut world = match World::from_config(config, trial) {
        Ok(w) => w,
        Err(e) => {
            let x0 = config.initial_point(trial);
            return TrialResult {
                trial,
                metrics: Vec::new(),
                final_decision: JointDecision::from_flat(config.problem.partition().clone(), x0)
                    .unwrap_or_else(|_| JointDecision::filled(config.problem.partition().clone(), 0.0)),
                status: TrialStatus::from_error(0, e),
                delay_bound,
                trace: None,
            };
        }
    };
    if options.trace {
        world = world.with_trace();
    }
    let mut metrics = Vec::with_capacity(config.horizon as usize);
    let mut status = TrialStatus::Completed;
    for t in 0..config.horizon {
        match world.step_round(t) {
            Ok(m) => metrics.push(m),
            Err(e) => {
                status = TrialStatus::from_error(t, e);
                break;
            }
        }
    }
    TrialResult {
        trial,
        metrics,
        final_decision: world.joint_decision(),
        status,
        delay_bound,
        trace: world.take_trace(),
    }
}

/// Cross-trial mean and standard deviation of one per-round quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub t: u64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    /// Normalized objective per round when `f*` is known, else `f(x(t))`.
    pub objective: Vec<Band>,
    pub normalized: bool,
    /// Mean and standard deviation of each trial's final `M(T)`.
    pub final_m: Option<(f64, f64)>,
    pub aborted: Vec<(u64, TrialStatus)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<TrialResult>,
    pub summary: ExperimentSummary,
}

/// Runs every trial, in parallel when allowed. Results are ordered by trial
/// index and all reductions run in that order, so the outcome does not depend
/// on scheduling.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> ExperimentOutcome {
    use rayon::prelude::*;
    let run = || -> Vec<TrialResult> {
        (0..config.trials)
            .into_par_iter()
            .map(|k| run_trial(config, k, options))
            .collect()
    };
    let results = match options.threads {
        Some(threads) => match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        None => run(),
    };
    let summary = summarize_experiment(&results);
    ExperimentOutcome { results, summary }
}

pub fn summarize_experiment(results: &[TrialResult]) -> ExperimentSummary {
    let normalized = results
        .iter()
        .flat_map(|r| r.metrics.first())
        .all(|m| m.normalized_objective.is_some())
        && results.iter().any(|r| !r.metrics.is_empty());
    let series: Vec<Vec<f64>> = results
        .iter()
        .map(|r| {
            r.metrics
                .iter()
                .map(|m| if normalized { m.normalized_objective.unwrap() } else { m.f_value })
                .collect()
        })
        .collect();
    let objective = bands(&series);
    let final_m = {
        let per_trial: Vec<f64> = results
            .iter()
            .filter_map(|r| {
                let stats = TraceStats::from_metrics(&r.metrics)?;
                stats.running_mean.last().copied()
            })
            .collect();
        if per_trial.len() == results.len() && !per_trial.is_empty() {
            Some(mean_std(&per_trial))
        } else {
            None
        }
    };
    let aborted = results
        .iter()
        .filter(|r| !r.status.is_completed())
        .map(|r| (r.trial, r.status.clone()))
        .collect();
    ExperimentSummary {
        objective,
        normalized,
        final_m,
        aborted,
    }
}

/// Per-round mean/std over however many series reach that round.
pub fn bands(series: &[Vec<f64>]) -> Vec<Band> {
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|t| {
            let values: Vec<f64> = series.iter().filter_map(|s| s.get(t).copied()).collect();
            let (mean, std) = mean_std(&values);
            Band {
                t: t as u64,
                mean,
                std,
                count: values.len(),
            }
        })
        .collect()
}

/// Mean and population standard deviation, summed in input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Partition;
    use crate::schedule::{validate_schedule_pair, Schedule};

    fn pair() -> SchedulePair {
        validate_schedule_pair(Schedule::power_law(0.1, 0.5), Schedule::power_law(0.01, 0.25)).unwrap()
    }

    fn seeds() -> TrialSeeds {
        TrialSeeds {
            master: 3,
            trial: 0,
            delay: None,
        }
    }

    #[test]
    fn single_agent_linear_step() {
        let partition = Partition::uniform(1, 2).unwrap();
        let a = vec![1.0, 2.0];
        let problem = Arc::new(Problem::linear_probe(partition, a.clone()).unwrap());
        let x0 = vec![0.5, -0.5];
        let mut world = World::new(problem, pair(), DelayModel::ZeroDelay, x0.clone(), seeds(), 1e-8)
            .unwrap()
            .with_trace();
        world.step_round(0).unwrap();
        let z = world.trace().unwrap()[0].z[0].clone();
        let az = a[0] * z[0] + a[1] * z[1];
        for k in 0..2 {
            let expected = x0[k] - 0.1 * az * z[k];
            assert!((world.decision()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn first_round_with_delay_uses_only_own_derivative() {
        let partition = Partition::uniform(3, 1).unwrap();
        let problem = Arc::new(Problem::separable_quadratic(partition, 10.0).unwrap());
        let delays = DelayModel::fixed_matrix(vec![vec![0, 1, 2], vec![2, 0, 1], vec![1, 1, 0]], 2).unwrap();
        let mut world = World::new(problem, pair(), delays, vec![1.0, 2.0, 3.0], seeds(), 1e-8)
            .unwrap()
            .with_trace();
        world.step_round(0).unwrap();
        let tr = &world.trace().unwrap()[0];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(tr.tau[i][j], if i == j { 0 } else { -1 });
            }
            let expected = tr.derivative[i] * tr.z[i][0] / 3.0;
            assert_eq!(tr.g[i][0], expected);
        }
    }

    #[test]
    fn constant_problem_never_moves() {
        let partition = Partition::uniform(2, 2).unwrap();
        let problem = Arc::new(Problem::constant(partition, vec![1.0, 3.0]).unwrap());
        let x0 = vec![0.3, -0.2, 1.0, 4.0];
        let mut world = World::new(
            problem,
            pair(),
            DelayModel::UniformRandom { bound: 2 },
            x0.clone(),
            seeds(),
            1e-8,
        )
        .unwrap();
        for t in 0..50 {
            let m = world.step_round(t).unwrap();
            assert_eq!(m.f_value, 2.0);
        }
        assert_eq!(world.decision(), x0.as_slice());
    }

    #[test]
    fn out_of_sync_round_rejected() {
        let partition = Partition::uniform(1, 1).unwrap();
        let problem = Arc::new(Problem::separable_quadratic(partition, 1.0).unwrap());
        let mut world = World::new(problem, pair(), DelayModel::ZeroDelay, vec![0.1], seeds(), 1e-8).unwrap();
        assert!(matches!(world.step_round(1), Err(EngineError::RoundOutOfSync { .. })));
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        let b = bands(&[vec![1.0, 2.0], vec![3.0]]);
        assert_eq!(b[0].mean, 2.0);
        assert_eq!(b[1].count, 1);
    }
}
