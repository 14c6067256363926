//! Self-checks of the estimator and delay invariants.
//!
//! Each check runs a Monte-Carlo or exhaustive experiment and compares it with
//! a closed-form bound. The CLI `check` subcommand prints these outcomes.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::agent::two_point_derivative;
use crate::delaynet::{DelayModel, DerivativeBroadcast, Medium, PeerTable};
use crate::engine::{RoundTrace, TrialSeeds, World};
use crate::problem::{Partition, Problem};
use crate::rng::{stream, StreamPurpose};
use crate::schedule::{validate_schedule_pair, Schedule};

/// `2 sqrt(6)`, the second-moment constant of the two-point estimator.
pub const SECOND_MOMENT_CONSTANT: f64 = 4.898_979_485_566_356;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub samples: usize,
    pub audit_rounds: u64,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            samples: 100_000,
            audit_rounds: 10_000,
            seed: 2024,
        }
    }
}

/// Per-coordinate mean and standard error of `D z` at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMoments {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Mean of `(D z_k)^2` per coordinate.
    pub second: Vec<f64>,
    /// Mean and standard error of `|D z|^2`.
    pub norm_sq: (f64, f64),
}

/// Samples the two-point estimator `D z` of `f_agent` at `x` with radius `u`.
pub fn sample_estimator(problem: &Problem, agent: usize, x: &[f64], u: f64, samples: usize, seed: u64) -> EstimatorMoments {
    let d = x.len();
    let mut rng = stream(seed, 0, StreamPurpose::Check, agent as u32);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let (mut norm_sum, mut norm_sq_sum) = (0.0, 0.0);
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut z = vec![0.0; d];
    for _ in 0..samples {
        for k in 0..d {
            z[k] = StandardNormal.sample(&mut rng);
            plus[k] = x[k] + u * z[k];
            minus[k] = x[k] - u * z[k];
        }
        let f_plus = problem.evaluate_local_flat(agent, &plus).unwrap();
        let f_minus = problem.evaluate_local_flat(agent, &minus).unwrap();
        let dd = two_point_derivative(f_plus, f_minus, u, 0.0).unwrap();
        let mut norm = 0.0;
        for k in 0..d {
            let v = dd * z[k];
            sum[k] += v;
            sum_sq[k] += v * v;
            norm += v * v;
        }
        norm_sum += norm;
        norm_sq_sum += norm * norm;
    }
    let n = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let second: Vec<f64> = sum_sq.iter().map(|s| s / n).collect();
    let std_err = mean
        .iter()
        .zip(&second)
        .map(|(m, s)| ((s - m * m).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    let norm_mean = norm_sum / n;
    let norm_se = ((norm_sq_sum / n - norm_mean * norm_mean).max(0.0) / (n - 1.0)).sqrt();
    EstimatorMoments {
        mean,
        std_err,
        second,
        norm_sq: (norm_mean, norm_se),
    }
}

fn point(seed: u64, index: u32, d: usize, radius: f64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = stream(seed, 1, StreamPurpose::Check, index);
    (0..d).map(|_| rng.random_range(-radius..=radius)).collect()
}

/// Mean of `D z` matches the analytic gradient of a quadratic (where smoothing
/// changes nothing but the constant) within 3 standard errors per coordinate.
pub fn check_unbiasedness(settings: &CheckSettings) -> CheckOutcome {
    let problem = Problem::separable_quadratic(Partition::uniform(1, 4).unwrap(), 10.0).unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..10 {
        let x = point(settings.seed, p, 4, 2.0);
        let m = sample_estimator(&problem, 0, &x, 0.05, settings.samples, settings.seed + p as u64);
        for ((mean, se), xk) in m.mean.iter().zip(&m.std_err).zip(&x) {
            worst = worst.max((mean - xk).abs() / se);
        }
    }
    CheckOutcome {
        name: "unbiasedness",
        passed: worst <= 3.0,
        detail: format!("worst |mean - grad| = {worst:.3} standard errors (limit 3)"),
    }
}

/// `|grad f - grad f^u| <= u L sqrt(d)` on the nonconvex cosine problem.
pub fn check_bias_bound(settings: &CheckSettings) -> CheckOutcome {
    let problem = Problem::nonconvex_cosine(Partition::uniform(1, 4).unwrap(), 0.1, 3.0).unwrap();
    let l = problem.meta.smoothness.unwrap();
    let mut worst_ratio: f64 = 0.0;
    let mut passed = true;
    for (ui, u) in [0.1, 0.01].into_iter().enumerate() {
        for p in 0..20 {
            let x = point(settings.seed, 100 + p, 4, 2.0);
            let grad = problem.gradient_oracle_flat(&x).unwrap().unwrap();
            let m = sample_estimator(&problem, 0, &x, u, settings.samples, settings.seed ^ (p as u64 + 31 * ui as u64));
            let gap = grad.iter().zip(&m.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let slack = 3.0 * m.std_err.iter().map(|s| s * s).sum::<f64>().sqrt();
            let bound = u * l * 2.0;
            passed &= gap <= bound + slack;
            worst_ratio = worst_ratio.max(gap / (bound + slack));
        }
    }
    CheckOutcome {
        name: "bias_bound",
        passed,
        detail: format!("worst gap / (uL sqrt(d) + 3 SE) = {worst_ratio:.3}"),
    }
}

/// Second moments of the estimator against `2 sqrt(6) G^2` scalings.
pub fn check_second_moment(settings: &CheckSettings) -> CheckOutcome {
    let probes = [vec![1.0, 2.0, -1.0, 0.5], vec![3.0, 0.0, 0.0, 0.0], vec![0.1, -0.2, 0.3, -0.4]];
    let mut passed = true;
    let mut detail = Vec::new();
    for (k, a) in probes.iter().enumerate() {
        let partition = Partition::uniform(2, 2).unwrap();
        let problem = Problem::linear_probe(partition.clone(), a.clone()).unwrap();
        let g = problem.meta.lipschitz.unwrap();
        let g2 = g * g;
        let d = a.len() as f64;
        // E[<a,z>^2 z_k^2] = |a|^2 + 2 a_k^2
        for &ak in a {
            passed &= g2 + 2.0 * ak * ak <= SECOND_MOMENT_CONSTANT * g2;
        }
        let x = point(settings.seed, 200 + k as u32, 4, 1.0);
        let m = sample_estimator(&problem, 0, &x, 0.1, settings.samples, settings.seed + 7 * k as u64);
        let (full, full_se) = m.norm_sq;
        passed &= full <= SECOND_MOMENT_CONSTANT * g2 * d + 3.0 * full_se;
        for agent in 0..partition.n() {
            let block: f64 = partition.range(agent).map(|c| m.second[c]).sum();
            passed &= block <= SECOND_MOMENT_CONSTANT * g2 * partition.dim(agent) as f64;
        }
        detail.push(format!("a{k}: E|g|^2 = {full:.4} vs {:.4}", SECOND_MOMENT_CONSTANT * g2 * d));
    }
    CheckOutcome {
        name: "second_moment",
        passed,
        detail: detail.join("; "),
    }
}

/// Result of auditing one delay model.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayAudit {
    pub label: String,
    pub bound: u64,
    pub violations: usize,
    pub rounds: u64,
}

/// Runs `rounds` rounds of all-to-all broadcasting and checks
/// `0 <= t - tau <= B` (for `t >= B`), monotone `tau`, and `tau_ii = t`.
pub fn audit_delay_model(label: &str, model: DelayModel, n: usize, rounds: u64, seed: u64) -> DelayAudit {
    let bound = model.bound();
    let mut medium = Medium::new(n, model, stream(seed, 0, StreamPurpose::Delay, 0)).unwrap();
    let mut tables = vec![PeerTable::new(n); n];
    let mut violations = 0;
    for t in 0..rounds {
        for j in 0..n {
            medium
                .post(
                    DerivativeBroadcast {
                        sender: j,
                        timestamp: t,
                        value: t as f64,
                    },
                    t,
                )
                .unwrap();
        }
        for (i, table) in tables.iter_mut().enumerate() {
            let before: Vec<i64> = table.entries().iter().map(|e| e.timestamp).collect();
            table.update(&medium.deliver(i, t));
            for (j, entry) in table.entries().iter().enumerate() {
                let tau = entry.timestamp;
                if tau < before[j] || tau > t as i64 {
                    violations += 1;
                }
                if i == j && tau != t as i64 {
                    violations += 1;
                }
                if t >= bound && (tau < 0 || t as i64 - tau > bound as i64) {
                    violations += 1;
                }
            }
        }
    }
    DelayAudit {
        label: label.to_string(),
        bound,
        violations,
        rounds,
    }
}

/// Every built-in model for each `B`; models that cannot exist for a given
/// `B` (gossip needs `1 <= period <= B`) are reported as `None`.
pub fn delay_audit_suite(bounds: &[u64], n: usize, rounds: u64, seed: u64) -> Vec<(String, u64, Option<DelayAudit>)> {
    use rand::Rng;
    let mut out = Vec::new();
    for &b in bounds {
        out.push((
            "zero_delay".into(),
            b,
            Some(audit_delay_model("zero_delay", DelayModel::ZeroDelay, n, rounds, seed)),
        ));
        let mut rng = stream(seed, b, StreamPurpose::Check, 0);
        let matrix: Vec<Vec<u64>> = (0..n)
            .map(|j| (0..n).map(|i| if i == j { 0 } else { rng.random_range(0..=b) }).collect())
            .collect();
        let fixed = DelayModel::fixed_matrix(matrix, b).unwrap();
        out.push(("fixed_matrix".into(), b, Some(audit_delay_model("fixed_matrix", fixed, n, rounds, seed))));
        out.push((
            "uniform_random".into(),
            b,
            Some(audit_delay_model(
                "uniform_random",
                DelayModel::UniformRandom { bound: b },
                n,
                rounds,
                seed,
            )),
        ));
        let gossip = DelayModel::periodic_gossip(b, b)
            .ok()
            .map(|m| audit_delay_model("periodic_gossip", m, n, rounds, seed));
        out.push(("periodic_gossip".into(), b, gossip));
    }
    out
}

pub fn check_delay_bound(settings: &CheckSettings) -> CheckOutcome {
    let suite = delay_audit_suite(&[0, 1, 5], 4, settings.audit_rounds, settings.seed);
    let violations: usize = suite.iter().filter_map(|s| s.2.as_ref()).map(|a| a.violations).sum();
    let audited = suite.iter().filter(|s| s.2.is_some()).count();
    CheckOutcome {
        name: "delay_bound",
        passed: violations == 0,
        detail: format!(
            "{audited} model/bound combinations audited over {} rounds, {violations} violations",
            settings.audit_rounds
        ),
    }
}

/// Recomputes every `g^i(t)` from the logged `(D, tau, z)` triples.
/// Returns the number of mismatching entries (bitwise).
pub fn replay_mismatches(trace: &[RoundTrace], n: usize) -> usize {
    let mut mismatches = 0;
    for round in trace {
        for i in 0..n {
            let mut g = vec![0.0; round.g[i].len()];
            for j in 0..n {
                let tau = round.tau[i][j];
                if tau < 0 {
                    continue;
                }
                let source = &trace[tau as usize];
                let dj = source.derivative[j];
                for (gk, zk) in g.iter_mut().zip(&source.z[i]) {
                    *gk += dj * zk;
                }
            }
            for gk in g.iter_mut() {
                *gk /= n as f64;
            }
            mismatches += g
                .iter()
                .zip(&round.g[i])
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
        }
    }
    mismatches
}

pub fn check_replay(settings: &CheckSettings) -> CheckOutcome {
    let partition = Partition::uniform(3, 2).unwrap();
    let problem = Arc::new(Problem::nonconvex_cosine(partition, 0.1, 3.0).unwrap());
    let pair = validate_schedule_pair(Schedule::power_law(0.1, 0.5), Schedule::power_law(0.01, 0.25)).unwrap();
    let mut world = World::new(
        problem,
        pair,
        DelayModel::UniformRandom { bound: 3 },
        vec![0.5, -0.3, 1.2, 0.1, -0.8, 0.4],
        TrialSeeds {
            master: settings.seed,
            trial: 0,
            delay: None,
        },
        1e-8,
    )
    .unwrap()
    .with_trace();
    for t in 0..100 {
        world.step_round(t).unwrap();
    }
    let mismatches = replay_mismatches(world.trace().unwrap(), 3);
    CheckOutcome {
        name: "replay",
        passed: mismatches == 0,
        detail: format!("{mismatches} bitwise mismatches over 100 rounds"),
    }
}

/// Average `|grad f(x(t)) - grad f(x(tau))|^2` against
/// `2 sqrt(6) G^2 L^2 B d p(t)^2` on the quadratic, where both gradients are
/// the points themselves and `G` is the radius of a ball holding the
/// trajectory.
pub fn check_delay_drift(settings: &CheckSettings) -> CheckOutcome {
    let bound = 3u64;
    let rounds = 300u64;
    let trials = 20u64;
    let radius = 2.0;
    let partition = Partition::uniform(2, 2).unwrap();
    let d = partition.total() as f64;
    let problem = Arc::new(Problem::separable_quadratic(partition, radius).unwrap());
    let g = problem.meta.lipschitz.unwrap();
    let l = problem.meta.smoothness.unwrap();
    let pair = validate_schedule_pair(Schedule::power_law(0.1, 0.5), Schedule::power_law(0.01, 0.25)).unwrap();
    let mut drift = vec![0.0; rounds as usize];
    let mut escaped = false;
    for trial in 0..trials {
        let mut world = World::new(
            problem.clone(),
            pair,
            DelayModel::UniformRandom { bound },
            vec![0.5, -0.5, 0.25, 0.75],
            TrialSeeds {
                master: settings.seed,
                trial,
                delay: None,
            },
            1e-8,
        )
        .unwrap()
        .with_trace();
        for t in 0..rounds {
            world.step_round(t).unwrap();
        }
        let trace = world.trace().unwrap();
        for round in trace {
            escaped |= crate::problem::norm(&round.x) > radius;
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let tau = round.tau[i][j].max(0) as usize;
                    let old = &trace[tau].x;
                    acc += round.x.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
            }
            drift[round.t as usize] += acc / 4.0 / trials as f64;
        }
    }
    let mut worst: f64 = 0.0;
    for t in bound..rounds {
        let limit = SECOND_MOMENT_CONSTANT * g * g * l * l * bound as f64 * d * pair.delayed_step_energy(t, bound);
        worst = worst.max(drift[t as usize] / limit);
    }
    CheckOutcome {
        name: "delay_drift",
        passed: !escaped && worst <= 1.0,
        detail: format!("worst drift / bound = {worst:.3e}; trajectory stayed in ball: {}", !escaped),
    }
}

/// Changing only the delay model leaves every perturbation draw unchanged.
pub fn check_stream_separation(settings: &CheckSettings) -> CheckOutcome {
    let partition = Partition::uniform(3, 2).unwrap();
    let problem = Arc::new(Problem::separable_quadratic(partition, 10.0).unwrap());
    let pair = validate_schedule_pair(Schedule::power_law(0.1, 0.5), Schedule::power_law(0.01, 0.25)).unwrap();
    let draws = |model: DelayModel| {
        let mut world = World::new(
            problem.clone(),
            pair,
            model,
            vec![1.0; 6],
            TrialSeeds {
                master: settings.seed,
                trial: 0,
                delay: None,
            },
            1e-8,
        )
        .unwrap()
        .with_trace();
        for t in 0..50 {
            world.step_round(t).unwrap();
        }
        world.take_trace().unwrap().into_iter().map(|r| r.z).collect::<Vec<_>>()
    };
    let reference = draws(DelayModel::ZeroDelay);
    let same = [
        DelayModel::UniformRandom { bound: 5 },
        DelayModel::periodic_gossip(2, 2).unwrap(),
    ]
    .into_iter()
    .all(|m| draws(m) == reference);
    CheckOutcome {
        name: "stream_separation",
        passed: same,
        detail: "perturbations compared across zero, uniform and gossip delays".into(),
    }
}

pub fn run_all(settings: &CheckSettings) -> Vec<CheckOutcome> {
    vec![
        check_unbiasedness(settings),
        check_bias_bound(settings),
        check_second_moment(settings),
        check_delay_bound(settings),
        check_replay(settings),
        check_delay_drift(settings),
        check_stream_separation(settings),
    ]
}
