//! `rfa`: geometric-median solves and federated training experiments.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 non-convergence.

mod config;
mod points;
mod report;
mod runs;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rfa_core::corruption::CorruptionKind;
use rfa_core::geomed::{
    brute_force_gm, gm_objective, smoothed_weiszfeld, StopReason, DEFAULT_NU, DEFAULT_REL_TOL, STANDALONE_BUDGET,
};
use rfa_core::{GmResult, SecureAverageOracle, WeiszfeldConfig};

use config::{parse_aggregator, ExperimentConfig};
use runs::SweepAxis;

const EXIT_INVALID: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "rfa", version, about = "Robust federated aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Geometric median of a weighted point set (CSV: coordinates then weight).
    GmSolve(GmSolveArgs),
    /// Train once per seed; writes {out}/{seed}.csv and {out}/summary.json.
    Simulate(SimulateArgs),
    /// Repeat `simulate` over a list of corruption levels or aggregators.
    Sweep(SweepArgs),
    /// Summarize a directory of runs.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct GmSolveArgs {
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NU)]
    nu: f64,
    #[arg(long, default_value_t = STANDALONE_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = DEFAULT_REL_TOL)]
    rel_tol: f64,
    /// Also solve with the high-accuracy reference solver and report the gap.
    #[arg(long)]
    reference: bool,
    /// Use the masked oracle with this seed.
    #[arg(long, value_name = "SEED")]
    masked: Option<u64>,
}

/// Flags that override fields of the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    rounds: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    corruption: Option<CorruptionKind>,
    #[arg(long)]
    rho: Option<f64>,
    /// mean, rfa, median_of_means[:groups] or sgd_step[:batch]
    #[arg(long)]
    aggregator: Option<String>,
    /// Run local updates on the thread pool (results are unchanged).
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// Comma-separated corruption levels.
    #[arg(long = "rho-values", value_name = "LIST", conflicts_with = "aggregators", required_unless_present = "aggregators")]
    rho_values: Option<String>,
    /// Comma-separated aggregator names.
    #[arg(long, value_name = "LIST")]
    aggregators: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_kind(s: &str) -> Result<CorruptionKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown corruption kind {s:?} (none, static_data, adaptive_data, omniscient)"))
}

fn load_config(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(r) = o.rounds {
        cfg.run.rounds = r;
    }
    if let Some(s) = &o.seeds {
        cfg.run.seeds = s.clone();
    }
    if let Some(d) = &o.out {
        cfg.run.out_dir = d.clone();
    }
    if let Some(k) = o.corruption {
        cfg.corruption.kind = k;
    }
    if let Some(r) = o.rho {
        cfg.corruption.rho = r;
    }
    if let Some(a) = &o.aggregator {
        cfg.algorithm.aggregator = parse_aggregator(a)?;
    }
    if o.parallel {
        cfg.run.parallel = true;
    }
    Ok(cfg)
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty())
}

#[derive(Serialize)]
struct Reference {
    z: Vec<f64>,
    g: f64,
    relative_gap: f64,
}

#[derive(Serialize)]
struct GmSolveOutput {
    schema_version: u32,
    #[serde(flatten)]
    result: GmResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<Reference>,
}

fn gm_solve(args: &GmSolveArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let set = points::parse_point_set(&text).with_context(|| args.input.display().to_string())?;
    let cfg = WeiszfeldConfig::standalone()
        .with_budget(args.budget)
        .with_rel_tol(args.rel_tol)
        .with_nu(args.nu)?;
    if !(args.rel_tol >= 0.0) {
        anyhow::bail!("--rel-tol must be >= 0");
    }
    let oracle = match args.masked {
        Some(seed) => SecureAverageOracle::masked(seed),
        None => SecureAverageOracle::plain(),
    };
    let result = smoothed_weiszfeld(&set, &cfg, None, &oracle)?;

    let mut code = if result.converged_by == StopReason::Budget {
        ExitCode::from(EXIT_NOT_CONVERGED)
    } else {
        ExitCode::SUCCESS
    };
    let reference = if args.reference {
        match brute_force_gm(&set, 1e-12) {
            Ok(z) => {
                let g = gm_objective(&z, &set)?;
                let relative_gap = (result.g_value - g) / g.max(f64::MIN_POSITIVE);
                Some(Reference { z, g, relative_gap })
            }
            Err(e) => {
                eprintln!("reference solver: {e}");
                code = ExitCode::from(EXIT_NOT_CONVERGED);
                None
            }
        }
    } else {
        None
    };
    let out = GmSolveOutput {
        schema_version: config::SCHEMA_VERSION,
        result,
        reference,
    };
    emit(&format!("{}\n", serde_json::to_string_pretty(&out)?));
    Ok(code)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GmSolve(args) => gm_solve(&args),
        Command::Simulate(args) => {
            let cfg = load_config(&args.config, &args.overrides)?;
            let summary = runs::simulate(&cfg)?;
            emit(&format!(
                "{} runs in {}: final train loss min {:.6e} mean {:.6e} max {:.6e}, {} diverged\n",
                summary.runs.len(),
                cfg.run.out_dir.display(),
                summary.final_train_loss.min,
                summary.final_train_loss.mean,
                summary.final_train_loss.max,
                summary.diverged_count
            ));
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args.config, &args.overrides)?;
            let axis = if let Some(list) = &args.rho_values {
                let values = split_list(list)
                    .map(|v| v.parse::<f64>().with_context(|| format!("bad rho value {v:?}")))
                    .collect::<Result<Vec<_>>>()?;
                SweepAxis::Rho(values)
            } else {
                let list = args.aggregators.as_deref().unwrap_or("");
                let values = split_list(list)
                    .map(|v| Ok((v.to_string(), parse_aggregator(v)?)))
                    .collect::<Result<Vec<_>>>()?;
                SweepAxis::Aggregator(values)
            };
            runs::sweep(&cfg, &axis)?;
            emit(&format!("wrote {}\n", cfg.run.out_dir.join("sweep.csv").display()));
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir } => {
            let rows = report::build_report(&dir)?;
            emit(&report::render(&rows));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
