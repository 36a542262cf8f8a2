//! `simulate` and `sweep`: one training run per seed, written as
//! `{out}/{seed}.csv` plus `{out}/summary.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rfa_core::fl::{run_federated, run_rfa_doubling, Aggregator};
use rfa_core::{FederatedTask, RunOutput};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};

/// One CSV row per completed round. Column order is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub dist_to_opt_sq: Option<f64>,
    pub oracle_calls: u64,
    pub corrupted_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingInfo {
    pub gamma: f64,
    pub step_counts: Vec<usize>,
    pub theta: f64,
    pub c_theta: Option<f64>,
    pub required_base_steps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_dist_to_opt_sq: Option<f64>,
    pub rounds_completed: usize,
    pub diverged: bool,
    pub halted: bool,
    pub total_oracle_calls: u64,
    pub bytes_modeled: u64,
    pub corrupted_devices: Vec<usize>,
    pub doubling: Option<DoublingInfo>,
    pub final_w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Self {
        Spread {
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedOutcome>,
    pub final_train_loss: Spread,
    pub final_test_loss: Spread,
    pub diverged_count: usize,
}

fn run_seed(cfg: &ExperimentConfig, task: &FederatedTask, seed: u64) -> Result<(RunOutput, SeedOutcome)> {
    let corruption = cfg.corruption_for(task, seed)?;
    let rounds = cfg.run.rounds;
    let (out, doubling) = match cfg.doubling_config() {
        Some(dc) => {
            let rep = run_rfa_doubling(task, &corruption, &dc, rounds, seed)?;
            let info = DoublingInfo {
                gamma: rep.gamma,
                step_counts: rep.step_counts,
                theta: rep.theta,
                c_theta: rep.c_theta,
                required_base_steps: rep.required_base_steps,
            };
            (rep.run, Some(info))
        }
        None => (run_federated(task, &corruption, &cfg.round_config(), rounds, seed)?, None),
    };
    let last = out.traces.last();
    let outcome = SeedOutcome {
        seed,
        initial_train_loss: out.initial_train_loss,
        final_train_loss: last.map_or(out.initial_train_loss, |t| t.train_loss),
        final_test_loss: last.map_or(out.initial_test_loss, |t| t.test_loss),
        final_dist_to_opt_sq: last.map_or(out.initial_dist_to_opt_sq, |t| t.dist_to_opt_sq),
        rounds_completed: out.traces.len(),
        diverged: out.diverged,
        halted: out.halted,
        total_oracle_calls: out.total_oracle_calls,
        bytes_modeled: out.bytes_modeled,
        corrupted_devices: corruption.realized_set,
        doubling,
        final_w: out.final_w.clone(),
    };
    Ok((out, outcome))
}

fn write_trace(path: &Path, out: &RunOutput) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    // header is written explicitly so that a zero-round run still has one
    w.write_record(["round", "train_loss", "test_loss", "dist_to_opt_sq", "oracle_calls", "corrupted_selected"])?;
    for t in &out.traces {
        w.write_record([
            t.round.to_string(),
            t.train_loss.to_string(),
            t.test_loss.to_string(),
            t.dist_to_opt_sq.map(|d| d.to_string()).unwrap_or_default(),
            t.oracle_calls.to_string(),
            t.corrupted_selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed of `cfg` and writes the results under `out_dir`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Summary> {
    let task = cfg.validate()?;
    let out_dir = &cfg.run.out_dir;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut runs = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let (out, outcome) = run_seed(cfg, &task, seed).with_context(|| format!("seed {seed}"))?;
        write_trace(&out_dir.join(format!("{seed}.csv")), &out)?;
        runs.push(outcome);
    }

    let train: Vec<f64> = runs.iter().map(|r| r.final_train_loss).collect();
    let test: Vec<f64> = runs.iter().map(|r| r.final_test_loss).collect();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        final_train_loss: Spread::of(&train),
        final_test_loss: Spread::of(&test),
        diverged_count: runs.iter().filter(|r| r.diverged).count(),
        runs,
    };
    let path = out_dir.join("summary.json");
    let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut file, &summary)?;
    writeln!(file)?;
    file.flush()?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Rho(Vec<f64>),
    Aggregator(Vec<(String, Aggregator)>),
}

impl SweepAxis {
    fn name(&self) -> &'static str {
        match self {
            SweepAxis::Rho(_) => "rho",
            SweepAxis::Aggregator(_) => "aggregator",
        }
    }

    /// `(label, config)` per axis value.
    fn expand(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |label: String, edit: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            edit(&mut c);
            c.run.out_dir = base.run.out_dir.join(format!("{}={label}", self.name()));
            (label, c)
        };
        match self {
            SweepAxis::Rho(values) => values
                .iter()
                .map(|&rho| with(rho.to_string(), &|c| c.corruption.rho = rho))
                .collect(),
            SweepAxis::Aggregator(values) => values
                .iter()
                .map(|(name, agg)| with(name.clone(), &|c| c.algorithm.aggregator = *agg))
                .collect(),
        }
    }
}

/// Runs the cross product of axis values and seeds. Each axis value gets
/// its own `simulate` directory; `{out}/sweep.csv` collects the finals in
/// long format.
pub fn sweep(base: &ExperimentConfig, axis: &SweepAxis) -> Result<()> {
    let cells = axis.expand(base);
    if cells.is_empty() {
        bail!("sweep axis {} has no values", axis.name());
    }
    for (label, cfg) in &cells {
        cfg.validate().with_context(|| format!("{}={label}", axis.name()))?;
    }
    fs::create_dir_all(&base.run.out_dir).with_context(|| format!("creating {}", base.run.out_dir.display()))?;

    let path = base.run.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "axis",
        "value",
        "seed",
        "final_train_loss",
        "final_test_loss",
        "final_dist_to_opt_sq",
        "total_oracle_calls",
        "diverged",
    ])?;
    for (label, cfg) in &cells {
        let summary = simulate(cfg)?;
        for r in &summary.runs {
            w.write_record([
                axis.name().to_string(),
                label.clone(),
                r.seed.to_string(),
                r.final_train_loss.to_string(),
                r.final_test_loss.to_string(),
                r.final_dist_to_opt_sq.map(|d| d.to_string()).unwrap_or_default(),
                r.total_oracle_calls.to_string(),
                r.diverged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
