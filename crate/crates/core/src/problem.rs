//! Local cost suite.
//!
//! Every agent `i` observes a black-box cost `f_i(x)` of the joint decision
//! `x = (x^1, ..., x^n)`; the team minimizes `f = (1/n) sum_i f_i`.
//! Maximization problems (the wind farm) are stored negated so that the
//! engine only ever descends.

use std::path::Path;

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::rng::{stream, StreamPurpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("agent index {agent} out of range for {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("invalid problem parameter: {0}")]
    InvalidParameter(String),
    #[error("layout file {path}: {message}")]
    Layout { path: String, message: String },
}

/// Block structure of the joint decision vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl Partition {
    pub fn new(dims: Vec<usize>) -> Result<Self, ProblemError> {
        if dims.is_empty() {
            return Err(ProblemError::InvalidParameter(
                "partition needs at least one agent".into(),
            ));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(ProblemError::InvalidParameter(format!(
                "agent {i} has an empty block"
            )));
        }
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &d in &dims {
            acc += d;
            offsets.push(acc);
        }
        Ok(Partition { dims, offsets })
    }

    /// `n` agents with `block` coordinates each.
    pub fn uniform(n: usize, block: usize) -> Result<Self, ProblemError> {
        Partition::new(vec![block; n])
    }

    pub fn n(&self) -> usize {
        self.dims.len()
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, agent: usize) -> usize {
        self.dims[agent]
    }

    pub fn range(&self, agent: usize) -> std::ops::Range<usize> {
        self.offsets[agent]..self.offsets[agent + 1]
    }
}

/// The concatenated decision `x = (x^1, ..., x^n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDecision {
    partition: Partition,
    values: Vec<f64>,
}

impl JointDecision {
    pub fn from_flat(partition: Partition, values: Vec<f64>) -> Result<Self, ProblemError> {
        if values.len() != partition.total() {
            return Err(ProblemError::DimensionMismatch {
                expected: partition.total(),
                got: values.len(),
            });
        }
        Ok(JointDecision { partition, values })
    }

    pub fn from_blocks(partition: Partition, blocks: &[Vec<f64>]) -> Result<Self, ProblemError> {
        if blocks.len() != partition.n() {
            return Err(ProblemError::DimensionMismatch {
                expected: partition.n(),
                got: blocks.len(),
            });
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.len() != partition.dim(i) {
                return Err(ProblemError::DimensionMismatch {
                    expected: partition.dim(i),
                    got: b.len(),
                });
            }
        }
        let values = blocks.concat();
        Ok(JointDecision { partition, values })
    }

    pub fn filled(partition: Partition, value: f64) -> Self {
        let values = vec![value; partition.total()];
        JointDecision { partition, values }
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn block(&self, agent: usize) -> &[f64] {
        &self.values[self.partition.range(agent)]
    }

    pub fn block_mut(&mut self, agent: usize) -> &mut [f64] {
        let r = self.partition.range(agent);
        &mut self.values[r]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Regularity constants and optimum. `None` means unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemMeta {
    /// `G` with `|f_i(x) - f_i(y)| <= G |x - y|` on `domain`.
    pub lipschitz: Option<f64>,
    /// `L` with `|grad f_i(x) - grad f_i(y)| <= L |x - y|` on `domain`.
    pub smoothness: Option<f64>,
    /// `f*` in the minimization orientation.
    pub optimum_value: Option<f64>,
    /// False when the physical objective is maximized and stored negated.
    pub minimizing: bool,
    pub domain: Domain,
    /// Constants obtained by sampling rather than in closed form.
    pub estimated: bool,
}

/// Region on which the metadata constants hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Everywhere,
    Ball { radius: f64 },
    Box { lo: f64, hi: f64 },
}

impl Domain {
    /// Uniform sample from the domain; `Everywhere` samples the cube `[-r, r]^d`.
    pub fn sample<R: Rng>(&self, rng: &mut R, d: usize, everywhere_radius: f64) -> Vec<f64> {
        match *self {
            Domain::Everywhere => (0..d)
                .map(|_| rng.random_range(-everywhere_radius..=everywhere_radius))
                .collect(),
            Domain::Box { lo, hi } => (0..d).map(|_| rng.random_range(lo..=hi)).collect(),
            Domain::Ball { radius } => {
                // rejection-free: scale a cube sample into the ball
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let target = radius * rng.random::<f64>().powf(1.0 / d as f64);
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x *= target / norm);
                }
                v
            }
        }
    }
}

/// Park-type wake model for turbines on a line.
#[derive(Debug, Clone, PartialEq)]
pub struct WindFarm {
    positions: Vec<f64>,
    pub free_stream: f64,
    pub rotor_diameter: f64,
    pub wake_decay: f64,
    /// `coupling[j * n + i] = c_ji` for `j` upstream of `i`, else 0.
    coupling: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindFarmParams {
    #[serde(default = "WindFarmParams::default_free_stream")]
    pub free_stream: f64,
    #[serde(default = "WindFarmParams::default_rotor_diameter")]
    pub rotor_diameter: f64,
    #[serde(default = "WindFarmParams::default_wake_decay")]
    pub wake_decay: f64,
    #[serde(default = "WindFarmParams::default_spacing")]
    pub spacing: f64,
}

impl WindFarmParams {
    fn default_free_stream() -> f64 {
        1.0
    }
    fn default_rotor_diameter() -> f64 {
        1.0
    }
    fn default_wake_decay() -> f64 {
        0.075
    }
    fn default_spacing() -> f64 {
        5.0
    }
}

impl Default for WindFarmParams {
    fn default() -> Self {
        WindFarmParams {
            free_stream: 1.0,
            rotor_diameter: 1.0,
            wake_decay: 0.075,
            spacing: 5.0,
        }
    }
}

pub const INDUCTION_MIN: f64 = 0.0;
pub const INDUCTION_MAX: f64 = 0.5;

/// Power coefficient `C_p(a) = 4a(1-a)^2`.
pub fn power_coefficient(a: f64) -> f64 {
    4.0 * a * (1.0 - a) * (1.0 - a)
}

fn power_coefficient_slope(a: f64) -> f64 {
    4.0 * (1.0 - a) * (1.0 - 3.0 * a)
}

fn clamp_induction(a: f64) -> f64 {
    a.clamp(INDUCTION_MIN, INDUCTION_MAX)
}

impl WindFarm {
    /// Turbines evenly spaced `params.spacing` rotor units apart.
    pub fn in_line(n: usize, params: WindFarmParams) -> Result<Self, ProblemError> {
        let positions = (0..n).map(|i| i as f64 * params.spacing).collect();
        WindFarm::with_positions(positions, params)
    }

    pub fn with_positions(positions: Vec<f64>, params: WindFarmParams) -> Result<Self, ProblemError> {
        if positions.is_empty() {
            return Err(ProblemError::InvalidParameter("wind farm needs a turbine".into()));
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(ProblemError::InvalidParameter("turbine positions must be finite".into()));
        }
        for (name, v) in [
            ("free_stream", params.free_stream),
            ("rotor_diameter", params.rotor_diameter),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ProblemError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(params.wake_decay.is_finite() && params.wake_decay >= 0.0) {
            return Err(ProblemError::InvalidParameter("wake_decay must be non-negative".into()));
        }
        let n = positions.len();
        let mut coupling = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let s = positions[i] - positions[j];
                if s > 0.0 {
                    let ratio = params.rotor_diameter / (params.rotor_diameter + 2.0 * params.wake_decay * s);
                    coupling[j * n + i] = ratio * ratio;
                }
            }
        }
        Ok(WindFarm {
            positions,
            free_stream: params.free_stream,
            rotor_diameter: params.rotor_diameter,
            wake_decay: params.wake_decay,
            coupling,
        })
    }

    /// Reads a layout CSV with columns `index,position`.
    pub fn from_layout_csv(path: &Path, params: WindFarmParams) -> Result<Self, ProblemError> {
        let layout_err = |message: String| ProblemError::Layout {
            path: path.display().to_string(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| layout_err(e.to_string()))?;
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for record in reader.deserialize::<(usize, f64)>() {
            rows.push(record.map_err(|e| layout_err(e.to_string()))?);
        }
        rows.sort_by_key(|r| r.0);
        for (k, (idx, _)) in rows.iter().enumerate() {
            if *idx != k {
                return Err(layout_err(format!("turbine indices must be 0..n, found {idx} at row {k}")));
            }
        }
        WindFarm::with_positions(rows.into_iter().map(|r| r.1).collect(), params)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn coupling(&self, upstream: usize, downstream: usize) -> f64 {
        self.coupling[upstream * self.len() + downstream]
    }

    /// Wind speed reaching turbine `i` after all upstream wakes.
    pub fn wind_speed(&self, i: usize, inductions: &[f64]) -> f64 {
        let n = self.len();
        let mut v = self.free_stream;
        for (j, &a) in inductions.iter().enumerate() {
            let c = self.coupling[j * n + i];
            if c != 0.0 {
                v *= 1.0 - 2.0 * clamp_induction(a) * c;
            }
        }
        v
    }

    /// Power of turbine `i`. Inductions are clamped to `[0, 0.5]`.
    pub fn turbine_power(&self, i: usize, inductions: &[f64]) -> f64 {
        let v = self.wind_speed(i, inductions);
        power_coefficient(clamp_induction(inductions[i])) * v * v * v
    }

    pub fn farm_power(&self, inductions: &[f64]) -> f64 {
        let n = self.len();
        (0..n).map(|i| self.turbine_power(i, inductions)).sum::<f64>() / n as f64
    }

    /// Gradient of `P_i` with respect to every induction factor.
    fn turbine_power_gradient(&self, i: usize, inductions: &[f64], out: &mut [f64]) {
        let n = self.len();
        out.iter_mut().for_each(|g| *g = 0.0);
        let v = self.wind_speed(i, inductions);
        let ai = clamp_induction(inductions[i]);
        let power = power_coefficient(ai) * v * v * v;
        if in_box(inductions[i]) {
            out[i] = power_coefficient_slope(ai) * v * v * v;
        }
        for (k, &ak) in inductions.iter().enumerate() {
            let c = self.coupling[k * n + i];
            if c != 0.0 && in_box(ak) {
                out[k] = power * 3.0 * (-2.0 * c) / (1.0 - 2.0 * clamp_induction(ak) * c);
            }
        }
    }

    /// Maximal mean power over the box, by multi-start cyclic coordinate
    /// search (51-point grid then golden-section refinement per coordinate).
    /// Starts: the uniform 1/3 profile, five constant profiles, and eight
    /// random profiles from a fixed seed.
    pub fn optimal_power(&self) -> (f64, Vec<f64>) {
        const SEED: u64 = 0x0057_1ADF_A2B5;
        let n = self.len();
        let mut starts: Vec<Vec<f64>> = vec![vec![1.0 / 3.0; n]];
        for k in 0..5 {
            starts.push(vec![0.05 + 0.1 * k as f64; n]);
        }
        let mut rng = stream(SEED, 0, StreamPurpose::Optimizer, 0);
        for _ in 0..8 {
            starts.push((0..n).map(|_| rng.random_range(INDUCTION_MIN..=INDUCTION_MAX)).collect());
        }
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for start in starts {
            let (value, point) = self.coordinate_search(start);
            if value > best.0 {
                best = (value, point);
            }
        }
        best
    }

    fn coordinate_search(&self, mut x: Vec<f64>) -> (f64, Vec<f64>) {
        const GRID: usize = 50;
        let mut value = self.farm_power(&x);
        for _sweep in 0..500 {
            let before = value;
            for k in 0..x.len() {
                let mut probe = x.clone();
                let mut eval = |a: f64| {
                    probe[k] = a;
                    self.farm_power(&probe)
                };
                let step = (INDUCTION_MAX - INDUCTION_MIN) / GRID as f64;
                let (mut best_a, mut best_v) = (x[k], value);
                for g in 0..=GRID {
                    let a = INDUCTION_MIN + g as f64 * step;
                    let v = eval(a);
                    if v > best_v {
                        best_a = a;
                        best_v = v;
                    }
                }
                let lo = (best_a - step).max(INDUCTION_MIN);
                let hi = (best_a + step).min(INDUCTION_MAX);
                let (a, v) = golden_max(&mut eval, lo, hi, 1e-12);
                if v > best_v {
                    best_a = a;
                    best_v = v;
                }
                if best_v > value {
                    x[k] = best_a;
                    value = best_v;
                }
            }
            if value - before <= 1e-15 * value.abs().max(1.0) {
                break;
            }
        }
        (value, x)
    }
}

fn in_box(a: f64) -> bool {
    (INDUCTION_MIN..=INDUCTION_MAX).contains(&a)
}

fn golden_max<F: FnMut(f64) -> f64>(f: &mut F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    let a = 0.5 * (lo + hi);
    (a, f(a))
}

/// Built-in local cost families.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    /// `f_i(x) = |x|^2 / 2` for every agent.
    SeparableQuadratic,
    /// `f_i(x) = <a, x>` for every agent.
    LinearProbe { a: Vec<f64> },
    /// `f_i(x) = sum_k x_k^2 / (1 + x_k^2) + lambda cos(omega x_k)`.
    NonconvexCosine { lambda: f64, omega: f64 },
    /// `f_i(x) = -P_i(x)` for the wake model.
    WindFarm(WindFarm),
    /// `f_i(x) = values[i]`.
    Constant { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub name: String,
    partition: Partition,
    pub meta: ProblemMeta,
    kind: ProblemKind,
}

/// Largest `|h'(x)|` of `x^2 / (1 + x^2)`, attained at `x = 1/sqrt(3)`.
const RATIONAL_SLOPE_MAX: f64 = 0.649_519_052_838_329; // 3 sqrt(3) / 8
/// Largest `|h''(x)|` of `x^2 / (1 + x^2)`, attained at `x = 0`.
const RATIONAL_CURVATURE_MAX: f64 = 2.0;

impl Problem {
    /// `radius` bounds the ball on which `G = radius` holds.
    pub fn separable_quadratic(partition: Partition, radius: f64) -> Result<Self, ProblemError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(ProblemError::InvalidParameter("radius must be positive".into()));
        }
        Ok(Problem {
            name: "separable_quadratic".into(),
            meta: ProblemMeta {
                lipschitz: Some(radius),
                smoothness: Some(1.0),
                optimum_value: Some(0.0),
                minimizing: true,
                domain: Domain::Ball { radius },
                estimated: false,
            },
            partition,
            kind: ProblemKind::SeparableQuadratic,
        })
    }

    pub fn linear_probe(partition: Partition, a: Vec<f64>) -> Result<Self, ProblemError> {
        if a.len() != partition.total() {
            return Err(ProblemError::DimensionMismatch {
                expected: partition.total(),
                got: a.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::InvalidParameter("probe vector must be finite".into()));
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Problem {
            name: "linear_probe".into(),
            meta: ProblemMeta {
                lipschitz: Some(norm),
                smoothness: Some(0.0),
                optimum_value: None,
                minimizing: true,
                domain: Domain::Everywhere,
                estimated: false,
            },
            partition,
            kind: ProblemKind::LinearProbe { a },
        })
    }

    pub fn nonconvex_cosine(partition: Partition, lambda: f64, omega: f64) -> Result<Self, ProblemError> {
        if !(lambda.is_finite() && omega.is_finite()) {
            return Err(ProblemError::InvalidParameter("lambda and omega must be finite".into()));
        }
        let d = partition.total() as f64;
        let coord_slope = RATIONAL_SLOPE_MAX + lambda.abs() * omega.abs();
        let coord_curvature = RATIONAL_CURVATURE_MAX + lambda.abs() * omega * omega;
        let optimum = d * cosine_coordinate_minimum(lambda, omega);
        Ok(Problem {
            name: "nonconvex_cosine".into(),
            meta: ProblemMeta {
                lipschitz: Some(coord_slope * d.sqrt()),
                // Hessian is diagonal, so its spectral norm is the largest entry
                smoothness: Some(coord_curvature),
                optimum_value: Some(optimum),
                minimizing: true,
                domain: Domain::Everywhere,
                estimated: false,
            },
            partition,
            kind: ProblemKind::NonconvexCosine { lambda, omega },
        })
    }

    /// Wind farm with one scalar decision per turbine. `f*` and the sampled
    /// `G`, `L` estimates are computed here, once.
    pub fn wind_farm(farm: WindFarm) -> Result<Self, ProblemError> {
        let partition = Partition::uniform(farm.len(), 1)?;
        let (best_power, _) = farm.optimal_power();
        let mut problem = Problem {
            name: "wind_farm".into(),
            meta: ProblemMeta {
                lipschitz: None,
                smoothness: None,
                optimum_value: Some(-best_power),
                minimizing: false,
                domain: Domain::Box {
                    lo: INDUCTION_MIN,
                    hi: INDUCTION_MAX,
                },
                estimated: true,
            },
            partition,
            kind: ProblemKind::WindFarm(farm),
        };
        let (g, l) = problem.sampled_constants(2_000);
        problem.meta.lipschitz = Some(g);
        problem.meta.smoothness = Some(l);
        Ok(problem)
    }

    pub fn constant(partition: Partition, values: Vec<f64>) -> Result<Self, ProblemError> {
        if values.len() != partition.n() {
            return Err(ProblemError::DimensionMismatch {
                expected: partition.n(),
                got: values.len(),
            });
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Problem {
            name: "constant".into(),
            meta: ProblemMeta {
                lipschitz: Some(0.0),
                smoothness: Some(0.0),
                optimum_value: Some(mean),
                minimizing: true,
                domain: Domain::Everywhere,
                estimated: false,
            },
            partition,
            kind: ProblemKind::Constant { values },
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn kind(&self) -> &ProblemKind {
        &self.kind
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    fn check_point(&self, x: &[f64]) -> Result<(), ProblemError> {
        if x.len() != self.partition.total() {
            return Err(ProblemError::DimensionMismatch {
                expected: self.partition.total(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_agent(&self, agent: usize) -> Result<(), ProblemError> {
        if agent >= self.n() {
            return Err(ProblemError::AgentOutOfRange { agent, n: self.n() });
        }
        Ok(())
    }

    fn check_decision(&self, x: &JointDecision) -> Result<(), ProblemError> {
        if x.partition() != &self.partition {
            return Err(ProblemError::DimensionMismatch {
                expected: self.partition.total(),
                got: x.as_slice().len(),
            });
        }
        Ok(())
    }

    pub fn evaluate_local(&self, agent: usize, x: &JointDecision) -> Result<f64, ProblemError> {
        self.check_decision(x)?;
        self.evaluate_local_flat(agent, x.as_slice())
    }

    pub fn evaluate_local_flat(&self, agent: usize, x: &[f64]) -> Result<f64, ProblemError> {
        self.check_agent(agent)?;
        self.check_point(x)?;
        Ok(self.local_unchecked(agent, x))
    }

    /// Fills `out[i] = f_i(x)` for every agent.
    pub fn evaluate_all_flat(&self, x: &[f64], out: &mut [f64]) -> Result<(), ProblemError> {
        self.check_point(x)?;
        if out.len() != self.n() {
            return Err(ProblemError::DimensionMismatch {
                expected: self.n(),
                got: out.len(),
            });
        }
        match &self.kind {
            // identical local costs: evaluate once
            ProblemKind::SeparableQuadratic
            | ProblemKind::LinearProbe { .. }
            | ProblemKind::NonconvexCosine { .. } => {
                let v = self.local_unchecked(0, x);
                out.iter_mut().for_each(|o| *o = v);
            }
            _ => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.local_unchecked(i, x);
                }
            }
        }
        Ok(())
    }

    fn local_unchecked(&self, agent: usize, x: &[f64]) -> f64 {
        match &self.kind {
            ProblemKind::SeparableQuadratic => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            ProblemKind::LinearProbe { a } => a.iter().zip(x).map(|(a, x)| a * x).sum(),
            ProblemKind::NonconvexCosine { lambda, omega } => x
                .iter()
                .map(|&v| {
                    let sq = v * v;
                    sq / (1.0 + sq) + lambda * (omega * v).cos()
                })
                .sum(),
            ProblemKind::WindFarm(farm) => -farm.turbine_power(agent, x),
            ProblemKind::Constant { values } => values[agent],
        }
    }

    pub fn evaluate_global(&self, x: &JointDecision) -> Result<f64, ProblemError> {
        self.check_decision(x)?;
        self.evaluate_global_flat(x.as_slice())
    }

    pub fn evaluate_global_flat(&self, x: &[f64]) -> Result<f64, ProblemError> {
        self.check_point(x)?;
        let n = self.n();
        Ok((0..n).map(|i| self.local_unchecked(i, x)).sum::<f64>() / n as f64)
    }

    /// Analytic `grad f_i(x)`; `None` when the problem is a pure black box.
    pub fn local_gradient_flat(&self, agent: usize, x: &[f64]) -> Result<Option<Vec<f64>>, ProblemError> {
        self.check_agent(agent)?;
        self.check_point(x)?;
        let g = match &self.kind {
            ProblemKind::SeparableQuadratic => x.to_vec(),
            ProblemKind::LinearProbe { a } => a.clone(),
            ProblemKind::NonconvexCosine { lambda, omega } => x
                .iter()
                .map(|&v| {
                    let denom = 1.0 + v * v;
                    2.0 * v / (denom * denom) - lambda * omega * (omega * v).sin()
                })
                .collect(),
            ProblemKind::WindFarm(farm) => {
                let mut g = vec![0.0; x.len()];
                farm.turbine_power_gradient(agent, x, &mut g);
                g.iter_mut().for_each(|v| *v = -*v);
                g
            }
            ProblemKind::Constant { .. } => vec![0.0; x.len()],
        };
        Ok(Some(g))
    }

    /// Analytic `grad f(x)` for diagnostics. The algorithm never calls this.
    pub fn gradient_oracle(&self, x: &JointDecision) -> Result<Option<Vec<f64>>, ProblemError> {
        self.check_decision(x)?;
        self.gradient_oracle_flat(x.as_slice())
    }

    pub fn gradient_oracle_flat(&self, x: &[f64]) -> Result<Option<Vec<f64>>, ProblemError> {
        self.check_point(x)?;
        let n = self.n();
        match &self.kind {
            ProblemKind::WindFarm(_) | ProblemKind::Constant { .. } => {
                let mut total = vec![0.0; x.len()];
                for i in 0..n {
                    match self.local_gradient_flat(i, x)? {
                        Some(g) => total.iter_mut().zip(g).for_each(|(t, g)| *t += g),
                        None => return Ok(None),
                    }
                }
                total.iter_mut().for_each(|t| *t /= n as f64);
                Ok(Some(total))
            }
            _ => self.local_gradient_flat(0, x),
        }
    }

    /// `f(x) / f*`, when `f*` is known and nonzero.
    pub fn normalized_objective(&self, f_value: f64) -> Option<f64> {
        match self.meta.optimum_value {
            Some(opt) if opt != 0.0 => Some(f_value / opt),
            _ => None,
        }
    }

    /// Sampled upper estimates of `G` and `L` over the metadata domain with a
    /// 1.5x margin. Uses a fixed seed.
    fn sampled_constants(&self, samples: usize) -> (f64, f64) {
        const SEED: u64 = 0xC0_45_7A_47;
        const MARGIN: f64 = 1.5;
        let d = self.partition.total();
        let mut rng = stream(SEED, 0, StreamPurpose::Optimizer, 1);
        let mut g_max: f64 = 0.0;
        let mut l_max: f64 = 0.0;
        for s in 0..samples {
            let x = self.meta.domain.sample(&mut rng, d, 1.0);
            // alternate between far pairs and close pairs for the curvature
            let scale = if s % 2 == 0 { 1.0 } else { 1e-3 };
            let mut y: Vec<f64> = x
                .iter()
                .map(|&v| v + scale * rng.random_range(-0.5..=0.5))
                .collect();
            if let Domain::Box { lo, hi } = self.meta.domain {
                y.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            }
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            for i in 0..self.n() {
                let gx = self.local_gradient_flat(i, &x).unwrap().unwrap();
                let gy = self.local_gradient_flat(i, &y).unwrap().unwrap();
                g_max = g_max.max(norm(&gx));
                if dist > 0.0 {
                    let diff = gx.iter().zip(&gy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    l_max = l_max.max(diff / dist);
                }
            }
        }
        (MARGIN * g_max, MARGIN * l_max)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `min_x x^2/(1+x^2) + lambda cos(omega x)`, by a grid over `[-20, 20]`
/// refined with golden section. Outside that window the rational term alone
/// exceeds 0.997, so the window holds the minimum whenever `|lambda| < 0.45`.
fn cosine_coordinate_minimum(lambda: f64, omega: f64) -> f64 {
    let h = |v: f64| {
        let sq = v * v;
        sq / (1.0 + sq) + lambda * (omega * v).cos()
    };
    let step = 1e-3;
    let mut best = (0.0, h(0.0));
    let mut v = -20.0;
    while v <= 20.0 {
        let hv = h(v);
        if hv < best.1 {
            best = (v, hv);
        }
        v += step;
    }
    let mut neg = |v: f64| -h(v);
    let (_, refined) = golden_max(&mut neg, best.0 - step, best.0 + step, 1e-12);
    best.1.min(-refined)
}
