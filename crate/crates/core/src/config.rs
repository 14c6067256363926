//! Experiment configuration file (JSON).
//!
//! ```json
//! {
//!   "problem":   { "kind": "separable_quadratic", "radius": 10.0 },
//!   "partition": { "agents": 4, "block": 2 },
//!   "step":      { "kind": "power_law", "base": 0.1, "exponent": 0.5 },
//!   "smoothing": { "kind": "power_law", "base": 0.01, "exponent": 0.25 },
//!   "delay":     { "kind": "uniform_random", "bound": 3 },
//!   "horizon": 1000, "trials": 5, "seed": 42,
//!   "init":      { "kind": "constant", "value": 1.0 },
//!   "output":    { "dir": "out" }
//! }
//! ```
//!
//! Parsing reports the JSON path of the offending field; semantic checks
//! (schedule ranges, delay bounds, dimensions) report the field name too.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::agent::DEFAULT_SMOOTHING_FLOOR;
use crate::delaynet::DelayModel;
use crate::problem::{Partition, Problem, WindFarm, WindFarmParams};
use crate::rng::{stream, StreamPurpose};
use crate::schedule::{validate_schedule_pair, Schedule, SchedulePair};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: field `{field}`: {message}")]
    Parse {
        file: String,
        field: String,
        message: String,
    },
    #[error("{file}: field `{field}`: {message}")]
    Invalid {
        file: String,
        field: String,
        message: String,
    },
}

impl ConfigError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { field, .. } | ConfigError::Invalid { field, .. } => Some(field),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    SeparableQuadratic {
        #[serde(default = "default_radius")]
        radius: f64,
    },
    LinearProbe {
        a: Vec<f64>,
    },
    NonconvexCosine {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_omega")]
        omega: f64,
    },
    WindFarm {
        #[serde(default)]
        layout: Option<PathBuf>,
        #[serde(default = "default_free_stream")]
        free_stream: f64,
        #[serde(default = "default_rotor_diameter")]
        rotor_diameter: f64,
        #[serde(default = "default_wake_decay")]
        wake_decay: f64,
        #[serde(default = "default_spacing")]
        spacing: f64,
    },
    Constant {
        values: Vec<f64>,
    },
}

fn default_radius() -> f64 {
    10.0
}
fn default_lambda() -> f64 {
    0.1
}
fn default_omega() -> f64 {
    3.0
}
fn default_free_stream() -> f64 {
    WindFarmParams::default().free_stream
}
fn default_rotor_diameter() -> f64 {
    WindFarmParams::default().rotor_diameter
}
fn default_wake_decay() -> f64 {
    WindFarmParams::default().wake_decay
}
fn default_spacing() -> f64 {
    WindFarmParams::default().spacing
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum PartitionSpec {
    Uniform { agents: usize, block: usize },
    Dims { dims: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayKind {
    ZeroDelay,
    FixedMatrix,
    UniformRandom,
    PeriodicGossip,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub kind: DelayKind,
    #[serde(default, rename = "bound", alias = "B")]
    pub bound: u64,
    /// Seed for the delay stream; defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub matrix: Option<Vec<Vec<u64>>>,
    /// Path to an `n x n` CSV of integer delays.
    #[serde(default)]
    pub matrix_file: Option<PathBuf>,
    #[serde(default)]
    pub period: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Explicit { values: Vec<f64> },
    Constant { value: f64 },
    /// Uniform in the ball of `radius` around `center` (per coordinate).
    RandomBall {
        radius: f64,
        #[serde(default)]
        center: f64,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Fraction of rounds (from the end) used for slope fitting.
    #[serde(default)]
    pub fit_fraction: Option<f64>,
}

/// Variants to cross for `sweep`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub step: Vec<Schedule>,
    #[serde(default)]
    pub smoothing: Vec<Schedule>,
    #[serde(default)]
    pub delay: Vec<DelaySpec>,
}

/// The file as written.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemSpec,
    pub partition: PartitionSpec,
    pub step: Schedule,
    pub smoothing: Schedule,
    pub delay: DelaySpec,
    pub horizon: u64,
    pub trials: u64,
    pub seed: u64,
    pub init: InitSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub smoothing_floor: Option<f64>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

/// A validated, ready-to-run experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: Arc<Problem>,
    pub schedules: SchedulePair,
    pub delay: DelayModel,
    pub delay_seed: Option<u64>,
    pub horizon: u64,
    pub trials: u64,
    pub seed: u64,
    pub init: InitSpec,
    pub smoothing_floor: f64,
    pub fit_fraction: f64,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn delay_bound(&self) -> u64 {
        self.delay.bound()
    }

    /// Initial joint decision for a trial.
    pub fn initial_point(&self, trial: u64) -> Vec<f64> {
        let d = self.problem.partition().total();
        match &self.init {
            InitSpec::Explicit { values } => values.clone(),
            InitSpec::Constant { value } => vec![*value; d],
            InitSpec::RandomBall { radius, center } => {
                let mut rng = stream(self.seed, trial, StreamPurpose::InitialPoint, 0);
                let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                dir.iter()
                    .map(|v| center + if norm > 0.0 { v * r / norm } else { 0.0 })
                    .collect()
            }
        }
    }
}

pub fn parse_config_str(text: &str, file: &str) -> Result<ConfigFile, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::Parse {
            file: file.to_string(),
            field: if field == "." { "<root>".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Reads, parses and validates a config file. Relative paths inside it are
/// resolved against the file's directory.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let raw = load_config_file(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    build_experiment(&raw, base, &path.display().to_string())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn build_partition(spec: &PartitionSpec) -> Result<Partition, crate::problem::ProblemError> {
    match spec {
        PartitionSpec::Uniform { agents, block } => Partition::uniform(*agents, *block),
        PartitionSpec::Dims { dims } => Partition::new(dims.clone()),
    }
}

pub fn build_problem(
    spec: &ProblemSpec,
    partition: Partition,
    base: &Path,
) -> Result<Problem, crate::problem::ProblemError> {
    use crate::problem::ProblemError;
    match spec {
        ProblemSpec::SeparableQuadratic { radius } => Problem::separable_quadratic(partition, *radius),
        ProblemSpec::LinearProbe { a } => Problem::linear_probe(partition, a.clone()),
        ProblemSpec::NonconvexCosine { lambda, omega } => Problem::nonconvex_cosine(partition, *lambda, *omega),
        ProblemSpec::Constant { values } => Problem::constant(partition, values.clone()),
        ProblemSpec::WindFarm {
            layout,
            free_stream,
            rotor_diameter,
            wake_decay,
            spacing,
        } => {
            if partition.dims().iter().any(|&d| d != 1) {
                return Err(ProblemError::InvalidParameter(
                    "wind farm agents control one induction factor each (block = 1)".into(),
                ));
            }
            let params = WindFarmParams {
                free_stream: *free_stream,
                rotor_diameter: *rotor_diameter,
                wake_decay: *wake_decay,
                spacing: *spacing,
            };
            let farm = match layout {
                Some(p) => WindFarm::from_layout_csv(&resolve(base, p), params)?,
                None => WindFarm::in_line(partition.n(), params)?,
            };
            if farm.len() != partition.n() {
                return Err(ProblemError::InvalidParameter(format!(
                    "layout has {} turbines but partition has {} agents",
                    farm.len(),
                    partition.n()
                )));
            }
            Problem::wind_farm(farm)
        }
    }
}

pub fn build_delay(spec: &DelaySpec, base: &Path) -> Result<DelayModel, (String, String)> {
    let err = |field: &str, e: String| (format!("delay.{field}"), e);
    match spec.kind {
        DelayKind::ZeroDelay => Ok(DelayModel::ZeroDelay),
        DelayKind::UniformRandom => Ok(DelayModel::UniformRandom { bound: spec.bound }),
        DelayKind::PeriodicGossip => {
            let period = spec
                .period
                .ok_or_else(|| err("period", "periodic_gossip needs a period".into()))?;
            DelayModel::periodic_gossip(period, spec.bound).map_err(|e| err("period", e.to_string()))
        }
        DelayKind::FixedMatrix => match (&spec.matrix, &spec.matrix_file) {
            (Some(m), None) => {
                DelayModel::fixed_matrix(m.clone(), spec.bound).map_err(|e| err("matrix", e.to_string()))
            }
            (None, Some(p)) => {
                let path = resolve(base, p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| err("matrix_file", format!("{}: {e}", path.display())))?;
                DelayModel::fixed_matrix_from_csv(&text, spec.bound).map_err(|e| err("matrix_file", e.to_string()))
            }
            _ => Err(err("matrix", "fixed_matrix needs exactly one of matrix, matrix_file".into())),
        },
    }
}

pub fn build_experiment(raw: &ConfigFile, base: &Path, file: &str) -> Result<ExperimentConfig, ConfigError> {
    let invalid = |field: &str, message: String| ConfigError::Invalid {
        file: file.to_string(),
        field: field.to_string(),
        message,
    };
    let schedules = validate_schedule_pair(raw.step, raw.smoothing).map_err(|e| {
        let field = match &e {
            crate::schedule::ScheduleError::NonPositiveBase { role, .. } => format!("{role}.base"),
            crate::schedule::ScheduleError::OutOfRangeExponent { role, .. } => format!("{role}.exponent"),
        };
        invalid(&field, e.to_string())
    })?;
    if raw.horizon == 0 {
        return Err(invalid("horizon", "must be positive".into()));
    }
    if raw.trials == 0 {
        return Err(invalid("trials", "must be positive".into()));
    }
    let floor = raw.smoothing_floor.unwrap_or(DEFAULT_SMOOTHING_FLOOR);
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(invalid("smoothing_floor", "must be a non-negative number".into()));
    }
    let last_u = schedules.u(raw.horizon - 1);
    if last_u < floor {
        return Err(invalid(
            "smoothing",
            format!("u(T-1) = {last_u:e} falls below the smoothing floor {floor:e}"),
        ));
    }
    let partition = build_partition(&raw.partition).map_err(|e| invalid("partition", e.to_string()))?;
    let problem = build_problem(&raw.problem, partition, base).map_err(|e| invalid("problem", e.to_string()))?;
    let delay = build_delay(&raw.delay, base).map_err(|(f, m)| invalid(&f, m))?;
    delay
        .check_agents(problem.n())
        .map_err(|e| invalid("delay.matrix", e.to_string()))?;
    let d = problem.partition().total();
    match &raw.init {
        InitSpec::Explicit { values } if values.len() != d => {
            return Err(invalid(
                "init.values",
                format!("expected {d} values, got {}", values.len()),
            ))
        }
        InitSpec::Explicit { values } if values.iter().any(|v| !v.is_finite()) => {
            return Err(invalid("init.values", "values must be finite".into()))
        }
        InitSpec::RandomBall { radius, center } if !(radius.is_finite() && *radius >= 0.0 && center.is_finite()) => {
            return Err(invalid("init.radius", "radius must be non-negative".into()))
        }
        InitSpec::Constant { value } if !value.is_finite() => {
            return Err(invalid("init.value", "value must be finite".into()))
        }
        _ => {}
    }
    let fit_fraction = raw.output.fit_fraction.unwrap_or(0.5);
    if !(fit_fraction > 0.0 && fit_fraction <= 1.0) {
        return Err(invalid("output.fit_fraction", "must be in (0, 1]".into()));
    }
    Ok(ExperimentConfig {
        problem: Arc::new(problem),
        schedules,
        delay,
        delay_seed: raw.delay.seed,
        horizon: raw.horizon,
        trials: raw.trials,
        seed: raw.seed,
        init: raw.init.clone(),
        smoothing_floor: floor,
        fit_fraction,
        output_dir: raw.output.dir.as_ref().map(|p| resolve(base, p)),
    })
}

/// One cell of a sweep: a label and the config with that cell's variants.
pub fn sweep_cells(raw: &ConfigFile) -> Vec<(String, ConfigFile)> {
    let sweep = raw.sweep.clone().unwrap_or_default();
    let steps = if sweep.step.is_empty() { vec![raw.step] } else { sweep.step };
    let smooths = if sweep.smoothing.is_empty() {
        vec![raw.smoothing]
    } else {
        sweep.smoothing
    };
    let delays = if sweep.delay.is_empty() {
        vec![raw.delay.clone()]
    } else {
        sweep.delay
    };
    let mut cells = Vec::new();
    for (a, step) in steps.iter().enumerate() {
        for (b, smoothing) in smooths.iter().enumerate() {
            for (c, delay) in delays.iter().enumerate() {
                let mut cell = raw.clone();
                cell.step = *step;
                cell.smoothing = *smoothing;
                cell.delay = delay.clone();
                cell.sweep = None;
                cells.push((format!("cell_s{a}_u{b}_d{c}"), cell));
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "problem": { "kind": "separable_quadratic" },
        "partition": { "agents": 2, "block": 2 },
        "step": { "kind": "power_law", "base": 0.1, "exponent": 0.5 },
        "smoothing": { "kind": "power_law", "base": 0.01, "exponent": 0.25 },
        "delay": { "kind": "uniform_random", "bound": 3 },
        "horizon": 100, "trials": 2, "seed": 7,
        "init": { "kind": "constant", "value": 1.0 }
    }"#;

    fn build(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let raw = parse_config_str(text, "test.json")?;
        build_experiment(&raw, Path::new("."), "test.json")
    }

    #[test]
    fn parses_good_config() {
        let cfg = build(GOOD).unwrap();
        assert_eq!(cfg.delay_bound(), 3);
        assert_eq!(cfg.problem.partition().total(), 4);
        assert_eq!(cfg.initial_point(0), vec![1.0; 4]);
        assert!(cfg.schedules.theorem_applies);
    }

    #[test]
    fn bad_exponent_names_field() {
        let text = GOOD.replace("\"exponent\": 0.5", "\"exponent\": 1.2");
        let err = build(&text).unwrap_err();
        assert_eq!(err.field(), Some("step.exponent"));
    }

    #[test]
    fn type_error_names_path() {
        let text = GOOD.replace("\"horizon\": 100", "\"horizon\": \"many\"");
        let err = build(&text).unwrap_err();
        assert_eq!(err.field(), Some("horizon"));
        let text = GOOD.replace("\"bound\": 3", "\"bound\": -3");
        assert_eq!(build(&text).unwrap_err().field(), Some("delay.bound"));
        let text = GOOD.replace("\"kind\": \"separable_quadratic\"", "\"kind\": \"nope\"");
        assert_eq!(build(&text).unwrap_err().field(), Some("problem.kind"));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = GOOD.replace("\"seed\": 7", "\"seed\": 7, \"colour\": 1");
        assert!(matches!(build(&text), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn semantic_checks() {
        let text = GOOD.replace("\"value\": 1.0", "\"value\": 1.0e400");
        assert!(build(&text).is_err());
        let text = GOOD.replace(
            "{ \"kind\": \"constant\", \"value\": 1.0 }",
            "{ \"kind\": \"explicit\", \"values\": [1.0] }",
        );
        assert_eq!(build(&text).unwrap_err().field(), Some("init.values"));
        let text = GOOD.replace("\"horizon\": 100", "\"horizon\": 0");
        assert_eq!(build(&text).unwrap_err().field(), Some("horizon"));
        let text = GOOD.replace(
            "\"kind\": \"uniform_random\", \"bound\": 3",
            "\"kind\": \"periodic_gossip\", \"bound\": 3, \"period\": 4",
        );
        assert_eq!(build(&text).unwrap_err().field(), Some("delay.period"));
        let text = GOOD.replace(
            "\"kind\": \"uniform_random\", \"bound\": 3",
            "\"kind\": \"fixed_matrix\", \"bound\": 3, \"matrix\": [[0,1,1],[0,0,0],[0,0,0]]",
        );
        assert_eq!(build(&text).unwrap_err().field(), Some("delay.matrix"));
        let text = GOOD.replace("\"exponent\": 0.25", "\"exponent\": 50.0");
        assert_eq!(build(&text).unwrap_err().field(), Some("smoothing"));
    }

    #[test]
    fn random_ball_is_seeded() {
        let text = GOOD.replace(
            "{ \"kind\": \"constant\", \"value\": 1.0 }",
            "{ \"kind\": \"random_ball\", \"radius\": 2.0 }",
        );
        let cfg = build(&text).unwrap();
        let a = cfg.initial_point(0);
        assert_eq!(a, cfg.initial_point(0));
        assert_ne!(a, cfg.initial_point(1));
        assert!(a.iter().map(|v| v * v).sum::<f64>().sqrt() <= 2.0);
    }

    #[test]
    fn sweep_cells_cross_product() {
        let text = GOOD.replace(
            "\"seed\": 7,",
            r#""seed": 7, "sweep": {
                "step": [{"kind":"power_law","base":0.1,"exponent":0.5},{"kind":"constant","base":0.05}],
                "delay": [{"kind":"zero_delay"},{"kind":"uniform_random","bound":1},{"kind":"uniform_random","bound":5}]
            },"#,
        );
        let raw = parse_config_str(&text, "t").unwrap();
        let cells = sweep_cells(&raw);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[5].0, "cell_s1_u0_d2");
        assert!(cells.iter().all(|(_, c)| c.sweep.is_none()));
    }
}
