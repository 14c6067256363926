//! Per-round records, convergence summaries and CSV persistence.
//!
//! `M(T) = (1/(T+1)) sum_{t<=T} |grad f(x(t))|^2` is the running average of
//! the squared gradient norm; `S(T) = sum_{B<=t<=T} eta(t) |grad f(x(t))|^2` is
//! its step-weighted sum counted from the delay bound `B`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{bands, Band, TrialResult};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gradient norms are unavailable for this problem")]
    GradientUnavailable,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub t: u64,
    /// `f(x(t))` in the minimization orientation.
    pub f_value: f64,
    pub grad_sq_norm: Option<f64>,
    pub eta: f64,
    pub u: f64,
    /// `sum_{k=t-B}^{t-1} eta(k)^2`; zero while `t < B`.
    pub p_sq: f64,
    pub normalized_objective: Option<f64>,
    /// Largest `t - tau_j^i(t)` over all pairs, an empty entry counting as
    /// `t + 1`. Not persisted.
    pub max_staleness: Option<u64>,
}

/// Running quantities of a single trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStats {
    pub running_mean: Vec<f64>,
}

impl TraceStats {
    pub fn from_metrics(metrics: &[RoundMetrics]) -> Option<TraceStats> {
        let mut sum = 0.0;
        let mut running_mean = Vec::with_capacity(metrics.len());
        for (k, m) in metrics.iter().enumerate() {
            sum += m.grad_sq_norm?;
            running_mean.push(sum / (k + 1) as f64);
        }
        Some(TraceStats { running_mean })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSummary {
    /// Cross-trial mean of `|grad f(x(t))|^2` per round.
    pub mean_grad_sq: Vec<f64>,
    /// `(T, M(T))`.
    pub m_of_t: Vec<(u64, f64)>,
    /// `(T, (1/(T-B+1)) sum_{t=B}^{T} ...)` for `T >= B`.
    pub m_from_burn_in: Vec<(u64, f64)>,
    /// `(T, S(T))`.
    pub s_of_t: Vec<(u64, f64)>,
    /// Least-squares slope of `ln M(T)` against `ln T` over the fit window.
    pub fitted_slope: f64,
    pub burn_in: u64,
}

impl ConvergenceSummary {
    pub fn final_m(&self) -> Option<f64> {
        self.m_of_t.last().map(|p| p.1)
    }
}

/// Summary over the trials of one experiment; `B` is taken from the results.
pub fn compute_summary(results: &[TrialResult], fit_fraction: f64) -> Result<ConvergenceSummary, MetricsError> {
    let burn_in = results.first().map(|r| r.delay_bound).unwrap_or(0);
    let traces: Vec<&[RoundMetrics]> = results.iter().map(|r| r.metrics.as_slice()).collect();
    summarize_trials(&traces, burn_in, fit_fraction)
}

/// Averages `grad_sq_norm` over trials round by round (up to the shortest
/// trace), then forms `M`, `S` and the fitted slope.
pub fn summarize_trials(
    traces: &[&[RoundMetrics]],
    burn_in: u64,
    fit_fraction: f64,
) -> Result<ConvergenceSummary, MetricsError> {
    let rounds = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    let k = traces.len() as f64;
    let mut mean_grad_sq = Vec::with_capacity(rounds);
    let mut etas = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let mut sum = 0.0;
        for trace in traces {
            sum += trace[t].grad_sq_norm.ok_or(MetricsError::GradientUnavailable)?;
        }
        mean_grad_sq.push(sum / k);
        etas.push(traces[0][t].eta);
    }

    let mut m_of_t = Vec::with_capacity(rounds);
    let mut m_from_burn_in = Vec::new();
    let mut s_of_t = Vec::with_capacity(rounds);
    let (mut total, mut tail, mut weighted) = (0.0, 0.0, 0.0);
    for (t, (&g, &eta)) in mean_grad_sq.iter().zip(&etas).enumerate() {
        let t64 = t as u64;
        total += g;
        m_of_t.push((t64, total / (t + 1) as f64));
        if t64 >= burn_in {
            tail += g;
            weighted += eta * g;
            m_from_burn_in.push((t64, tail / (t64 - burn_in + 1) as f64));
        }
        s_of_t.push((t64, weighted));
    }

    let start = ((rounds as f64) * (1.0 - fit_fraction)).floor().max(1.0) as usize;
    let window: Vec<(f64, f64)> = m_of_t
        .iter()
        .skip(start)
        .map(|&(t, m)| (t as f64, m))
        .collect();
    let fitted_slope = fit_loglog_slope(&window).unwrap_or(f64::NAN);

    Ok(ConvergenceSummary {
        mean_grad_sq,
        m_of_t,
        m_from_burn_in,
        s_of_t,
        fitted_slope,
        burn_in,
    })
}

/// Least-squares slope of `ln y` against `ln x`, skipping points where either
/// is non-positive. `None` with fewer than two usable points.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

pub const ROUNDS_HEADER: [&str; 8] = [
    "t",
    "trial",
    "f_value",
    "grad_sq_norm",
    "eta",
    "u",
    "p_sq",
    "normalized_objective",
];
pub const SUMMARY_HEADER: [&str; 3] = ["T", "M", "S"];
const MISSING: &str = "NA";

/// 17 significant digits: parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_else(|| MISSING.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub rounds: PathBuf,
    pub trials: Vec<PathBuf>,
    pub summary: PathBuf,
}

fn write_rounds<W: Write>(w: &mut csv::Writer<W>, trial: u64, metrics: &[RoundMetrics]) -> csv::Result<()> {
    for m in metrics {
        w.write_record([
            m.t.to_string(),
            trial.to_string(),
            format_f64(m.f_value),
            format_opt(m.grad_sq_norm),
            format_f64(m.eta),
            format_f64(m.u),
            format_f64(m.p_sq),
            format_opt(m.normalized_objective),
        ])?;
    }
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> MetricsError + '_ {
    move |e| MetricsError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `rounds.csv` (every trial, long format), one `trial_NNN.csv` per
/// trial, and `summary.csv` (`T,M,S`; header only without a summary).
pub fn export_csv(
    results: &[TrialResult],
    summary: Option<&ConvergenceSummary>,
    dir: &Path,
) -> Result<ExportPaths, MetricsError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rounds = dir.join("rounds.csv");
    let mut all = csv::Writer::from_writer(BufWriter::new(File::create(&rounds).map_err(io_err(&rounds))?));
    all.write_record(ROUNDS_HEADER).map_err(csv_err(&rounds))?;
    let mut trials = Vec::with_capacity(results.len());
    for r in results {
        write_rounds(&mut all, r.trial, &r.metrics).map_err(csv_err(&rounds))?;
        let path = dir.join(format!("trial_{:03}.csv", r.trial));
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path).map_err(io_err(&path))?));
        w.write_record(ROUNDS_HEADER).map_err(csv_err(&path))?;
        write_rounds(&mut w, r.trial, &r.metrics).map_err(csv_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        trials.push(path);
    }
    all.flush().map_err(io_err(&rounds))?;

    let summary_path = dir.join("summary.csv");
    write_summary(summary, &summary_path)?;
    Ok(ExportPaths {
        rounds,
        trials,
        summary: summary_path,
    })
}

pub fn write_summary(summary: Option<&ConvergenceSummary>, path: &Path) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(io_err(path))?));
    w.write_record(SUMMARY_HEADER).map_err(csv_err(path))?;
    if let Some(s) = summary {
        for ((t, m), (_, sv)) in s.m_of_t.iter().zip(&s.s_of_t) {
            w.write_record([t.to_string(), format_f64(*m), format_f64(*sv)])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn parse_opt(field: &str) -> Result<Option<f64>, String> {
    if field == MISSING {
        Ok(None)
    } else {
        field.parse().map(Some).map_err(|e| format!("{field:?}: {e}"))
    }
}

/// One trial read back from a long-format CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedTrial {
    pub trial: u64,
    pub metrics: Vec<RoundMetrics>,
}

/// Reads a long-format rounds CSV, grouping rows by trial in order of first
/// appearance.
pub fn read_rounds_csv(path: &Path) -> Result<Vec<ImportedTrial>, MetricsError> {
    let fmt = |message: String| MetricsError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.clone();
    if header.iter().collect::<Vec<_>>() != ROUNDS_HEADER {
        return Err(fmt(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut trials: Vec<ImportedTrial> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let row = line + 2;
        let get = |k: usize| record.get(k).ok_or_else(|| fmt(format!("row {row}: missing column {k}")));
        let int = |k: usize| -> Result<u64, MetricsError> {
            get(k)?.parse().map_err(|e| fmt(format!("row {row}: {e}")))
        };
        let real = |k: usize| -> Result<f64, MetricsError> {
            parse_opt(get(k)?)
                .map_err(|e| fmt(format!("row {row}: {e}")))?
                .ok_or_else(|| fmt(format!("row {row}: column {} may not be NA", ROUNDS_HEADER[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>, MetricsError> {
            parse_opt(get(k)?).map_err(|e| fmt(format!("row {row}: {e}")))
        };
        let trial = int(1)?;
        let metrics = RoundMetrics {
            t: int(0)?,
            f_value: real(2)?,
            grad_sq_norm: opt(3)?,
            eta: real(4)?,
            u: real(5)?,
            p_sq: real(6)?,
            normalized_objective: opt(7)?,
            max_staleness: None,
        };
        match trials.iter_mut().find(|t| t.trial == trial) {
            Some(t) => t.metrics.push(metrics),
            None => trials.push(ImportedTrial {
                trial,
                metrics: vec![metrics],
            }),
        }
    }
    Ok(trials)
}

/// Reads `summary.csv` back as `(T, M, S)` triples.
pub fn read_summary_csv(path: &Path) -> Result<Vec<(u64, f64, f64)>, MetricsError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for record in reader.deserialize::<(u64, f64, f64)>() {
        rows.push(record.map_err(csv_err(path))?);
    }
    Ok(rows)
}

/// Which per-round column to aggregate for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotColumn {
    NormalizedObjective,
    FValue,
    GradSqNorm,
}

impl PlotColumn {
    fn pick(self, m: &RoundMetrics) -> Option<f64> {
        match self {
            PlotColumn::NormalizedObjective => m.normalized_objective,
            PlotColumn::FValue => Some(m.f_value),
            PlotColumn::GradSqNorm => m.grad_sq_norm,
        }
    }
}

/// Cross-trial mean and standard deviation per round. `None` picks the
/// normalized objective when every row has it, else `f_value`.
pub fn plot_bands(trials: &[ImportedTrial], column: Option<PlotColumn>) -> Result<(PlotColumn, Vec<Band>), MetricsError> {
    let column = column.unwrap_or_else(|| {
        let all_normalized = trials
            .iter()
            .all(|t| t.metrics.iter().all(|m| m.normalized_objective.is_some()));
        if all_normalized && !trials.is_empty() {
            PlotColumn::NormalizedObjective
        } else {
            PlotColumn::FValue
        }
    });
    let mut series = Vec::with_capacity(trials.len());
    for trial in trials {
        let mut values = Vec::with_capacity(trial.metrics.len());
        for m in &trial.metrics {
            values.push(column.pick(m).ok_or_else(|| MetricsError::Format {
                path: String::new(),
                message: format!("trial {} round {} lacks {:?}", trial.trial, m.t, column),
            })?);
        }
        series.push(values);
    }
    Ok((column, bands(&series)))
}

/// Whitespace-delimited `round mean std lower upper` table.
pub fn write_plot_table<W: Write + ?Sized>(out: &mut W, bands: &[Band]) -> std::io::Result<()> {
    writeln!(out, "# round mean std lower upper")?;
    for b in bands {
        writeln!(
            out,
            "{} {} {} {} {}",
            b.t,
            format_f64(b.mean),
            format_f64(b.std),
            format_f64(b.mean - b.std),
            format_f64(b.mean + b.std)
        )?;
    }
    Ok(())
}
