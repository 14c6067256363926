use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use zocoop_core::checks::{run_all, CheckSettings};
use zocoop_core::config::{build_experiment, load_config_file, sweep_cells, ConfigError, ExperimentConfig};
use zocoop_core::engine::{run_experiment, ExperimentOutcome, RunOptions};
use zocoop_core::metrics::{compute_summary, export_csv, plot_bands, read_rounds_csv, write_plot_table, PlotColumn};
use zocoop_core::load_experiment;

const EXIT_CONFIG: u8 = 1;
const EXIT_ABORT: u8 = 2;

#[derive(Parser)]
#[command(name = "zocoop", version, about = "Zeroth-order cooperative optimization with delayed broadcasts")]
struct Cli {
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Output directory; overrides `output.dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of trials; overrides the config.
    #[arg(long)]
    trials: Option<u64>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and export CSV results.
    Run(RunArgs),
    /// Run every cell of the config's `sweep` block, one directory per cell.
    Sweep(RunArgs),
    /// Run the estimator and delay self-checks.
    Check {
        /// Monte-Carlo samples per point.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Rounds per delay-model audit.
        #[arg(long, default_value_t = 10_000)]
        rounds: u64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Aggregate a rounds CSV into a whitespace table: round mean std lower upper.
    Plot {
        csv: PathBuf,
        #[arg(long, value_enum)]
        column: Option<Column>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Column {
    NormalizedObjective,
    FValue,
    GradSqNorm,
}

impl From<Column> for PlotColumn {
    fn from(c: Column) -> Self {
        match c {
            Column::NormalizedObjective => PlotColumn::NormalizedObjective,
            Column::FValue => PlotColumn::FValue,
            Column::GradSqNorm => PlotColumn::GradSqNorm,
        }
    }
}

enum Failure {
    Config(ConfigError),
    Abort(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Abort(e)
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var("ZOCOOP_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs, file: &str) -> Result<(), ConfigError> {
    if let Some(trials) = args.trials {
        if trials == 0 {
            return Err(ConfigError::Invalid {
                file: file.into(),
                field: "trials".into(),
                message: "--trials must be positive".into(),
            });
        }
        cfg.trials = trials;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(())
}

/// Runs one experiment, exports it, and reports aborted trials as an error
/// after the CSV files are written.
fn execute(cfg: &ExperimentConfig, out: &Path, label: &str, quiet: bool) -> anyhow::Result<()> {
    let options = RunOptions {
        trace: false,
        threads: threads_from_env(),
    };
    let ExperimentOutcome { results, summary } = run_experiment(cfg, options);
    let convergence = compute_summary(&results, cfg.fit_fraction).ok();
    let paths = export_csv(&results, convergence.as_ref(), out).with_context(|| format!("exporting {label}"))?;
    if !quiet {
        let what = if summary.normalized { "normalized objective" } else { "objective" };
        if let Some(last) = summary.objective.last() {
            println!("{label}: {} trials, final {what} {:.6} +/- {:.6}", results.len(), last.mean, last.std);
        }
        if let Some(c) = &convergence {
            println!(
                "{label}: M(T) = {:.6e}, fitted log-log slope {:.4}",
                c.final_m().unwrap_or(f64::NAN),
                c.fitted_slope
            );
        }
        println!("{label}: wrote {}", paths.rounds.parent().unwrap_or(out).display());
    }
    if !summary.aborted.is_empty() {
        let detail: Vec<String> = summary
            .aborted
            .iter()
            .map(|(trial, status)| format!("trial {trial}: {status:?}"))
            .collect();
        anyhow::bail!("{label}: {} trial(s) aborted; {}", detail.len(), detail.join("; "));
    }
    Ok(())
}

fn out_dir(flag: Option<&PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_run(args: &RunArgs, quiet: bool) -> Result<(), Failure> {
    let file = args.config.display().to_string();
    let mut cfg = load_experiment(&args.config)?;
    apply_overrides(&mut cfg, args, &file)?;
    let out = out_dir(args.out.as_ref(), &cfg);
    execute(&cfg, &out, "run", quiet)?;
    Ok(())
}

fn cmd_sweep(args: &RunArgs, quiet: bool) -> Result<(), Failure> {
    let file = args.config.display().to_string();
    let raw = load_config_file(&args.config)?;
    let base = args.config.parent().unwrap_or_else(|| Path::new("."));
    // validate every cell before running any of them
    let mut cells = Vec::new();
    for (label, cell) in sweep_cells(&raw) {
        let mut cfg = build_experiment(&cell, base, &format!("{file} [{label}]"))?;
        apply_overrides(&mut cfg, args, &file)?;
        cells.push((label, cfg));
    }
    let root = match (&args.out, cells.first()) {
        (Some(o), _) => o.clone(),
        (None, Some((_, cfg))) => out_dir(None, cfg),
        (None, None) => PathBuf::from("out"),
    };
    let mut failures = Vec::new();
    for (label, cfg) in &cells {
        if let Err(e) = execute(cfg, &root.join(label), label, quiet) {
            failures.push(format!("{e:#}"));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Abort(anyhow::anyhow!(failures.join("\n"))))
    }
}

fn cmd_check(settings: CheckSettings, quiet: bool) -> Result<(), Failure> {
    let outcomes = run_all(&settings);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        if !quiet || !o.passed {
            println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        }
    }
    if failed > 0 {
        return Err(Failure::Abort(anyhow::anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn cmd_plot(csv: &Path, column: Option<Column>, out: Option<&Path>) -> Result<(), Failure> {
    let trials = read_rounds_csv(csv).with_context(|| format!("reading {}", csv.display()))?;
    let (column, bands) = plot_bands(&trials, column.map(Into::into)).context("aggregating rounds")?;
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "# column {column:?}, {} trials", trials.len())?;
        write_plot_table(w, &bands)
    };
    match out {
        Some(path) => {
            let mut file = std::io::BufWriter::new(
                std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            write(&mut file).and_then(|_| file.flush()).context("writing plot table")?;
        }
        None => write(&mut std::io::stdout().lock()).context("writing plot table")?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, cli.quiet),
        Command::Sweep(args) => cmd_sweep(args, cli.quiet),
        Command::Check { samples, rounds, seed } => cmd_check(
            CheckSettings {
                samples: *samples,
                audit_rounds: *rounds,
                seed: *seed,
            },
            cli.quiet,
        ),
        Command::Plot { csv, column, out } => cmd_plot(csv, *column, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Abort(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ABORT)
        }
    }
}
