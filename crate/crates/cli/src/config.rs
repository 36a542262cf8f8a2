//! Experiment configuration: a single JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rfa_core::corruption::{CorruptionKind, CorruptionSpec};
use rfa_core::fl::{Aggregator, DoublingConfig, LocalSpec, LrSchedule, RoundConfig};
use rfa_core::tasks::{generate_logistic_task, generate_ls_task, LogisticTaskConfig, LsTaskConfig};
use rfa_core::{FederatedTask, OracleMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum TaskConfig {
    LeastSquares(LsTaskConfig),
    Logistic(LogisticTaskConfig),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::LeastSquares(LsTaskConfig::default())
    }
}

impl TaskConfig {
    pub fn generate(&self) -> rfa_core::Result<FederatedTask> {
        match self {
            TaskConfig::LeastSquares(c) => generate_ls_task(c),
            TaskConfig::Logistic(c) => generate_logistic_task(c),
        }
    }

    fn n_per_device(&self) -> usize {
        match self {
            TaskConfig::LeastSquares(c) => c.n_per_device,
            TaskConfig::Logistic(c) => c.n_per_device,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub kind: CorruptionKind,
    pub rho: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            kind: CorruptionKind::None,
            rho: 0.0,
        }
    }
}

/// Doubling local-step schedule for least squares; replaces `local` and `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoublingParams {
    pub base_steps: usize,
    pub doubling: bool,
    pub q: f64,
    pub delta: f64,
    pub gm_budget: usize,
    pub gm_rel_tol: f64,
}

impl Default for DoublingParams {
    fn default() -> Self {
        let d = DoublingConfig::default();
        DoublingParams {
            base_steps: d.base_steps,
            doubling: d.doubling,
            q: d.q,
            delta: d.delta,
            gm_budget: d.gm_budget,
            gm_rel_tol: d.gm_rel_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmConfig {
    pub devices_per_round: usize,
    pub aggregator: Aggregator,
    pub local: LocalSpec,
    pub lr: LrSchedule,
    pub oracle: OracleMode,
    pub halt_on_divergence: bool,
    pub doubling: Option<DoublingParams>,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        let r = RoundConfig::default();
        AlgorithmConfig {
            devices_per_round: r.devices_per_round,
            aggregator: r.aggregator,
            local: r.local,
            lr: r.lr,
            oracle: r.oracle,
            halt_on_divergence: r.halt_on_divergence,
            doubling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 100,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub corruption: CorruptionConfig,
    pub algorithm: AlgorithmConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn round_config(&self) -> RoundConfig {
        let a = &self.algorithm;
        RoundConfig {
            devices_per_round: a.devices_per_round,
            local: a.local,
            lr: a.lr,
            aggregator: a.aggregator,
            oracle: a.oracle,
            parallel: self.run.parallel,
            halt_on_divergence: a.halt_on_divergence,
        }
    }

    pub fn doubling_config(&self) -> Option<DoublingConfig> {
        self.algorithm.doubling.map(|p| DoublingConfig {
            devices_per_round: self.algorithm.devices_per_round,
            base_steps: p.base_steps,
            doubling: p.doubling,
            q: p.q,
            delta: p.delta,
            gm_budget: p.gm_budget,
            gm_rel_tol: p.gm_rel_tol,
            oracle: self.algorithm.oracle,
            parallel: self.run.parallel,
        })
    }

    /// The corrupted set for a run seed. Selection uses the run seed.
    pub fn corruption_for(&self, task: &FederatedTask, seed: u64) -> rfa_core::Result<CorruptionSpec> {
        CorruptionSpec::realize(self.corruption.kind, self.corruption.rho, seed, &task.partition.alpha)
    }

    /// Checks every precondition that can be checked without training.
    /// Returns the generated task so callers do not build it twice.
    pub fn validate(&self) -> Result<FederatedTask> {
        let task = self.task.generate().context("task")?;
        if self.run.seeds.is_empty() {
            bail!("run.seeds: at least one seed is required");
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            bail!("run.seeds: duplicate seed");
        }
        let k = task.partition.num_devices();
        let m = self.algorithm.devices_per_round;
        if m == 0 || m > k {
            bail!("algorithm.devices_per_round: must lie in [1, {k}], got {m}");
        }
        self.corruption_for(&task, 0).context("corruption")?;
        self.algorithm.aggregator.validate().context("algorithm.aggregator")?;
        self.algorithm.lr.validate().context("algorithm.lr")?;
        if let OracleMode::Masked { scale, .. } = self.algorithm.oracle {
            if !(scale > 0.0) || !scale.is_finite() {
                bail!("algorithm.oracle.scale: must be finite and > 0");
            }
        }

        let n = self.task.n_per_device();
        match self.algorithm.local {
            LocalSpec::Sgd { batch, epochs } => {
                if batch == 0 || batch > n {
                    bail!("algorithm.local.batch: must lie in [1, {n}], got {batch}");
                }
                if epochs == 0 {
                    bail!("algorithm.local.epochs: must be >= 1");
                }
            }
            LocalSpec::TailAvgSgd { steps } if steps < 2 => bail!("algorithm.local.steps: must be >= 2"),
            LocalSpec::TailAvgSgd { .. } => {}
        }
        if let Aggregator::SgdStep { batch } = self.algorithm.aggregator {
            if batch > n {
                bail!("algorithm.aggregator.batch: must be <= {n}, got {batch}");
            }
        }

        if let Some(p) = &self.algorithm.doubling {
            if !matches!(self.task, TaskConfig::LeastSquares(_)) {
                bail!("algorithm.doubling: requires the least_squares task");
            }
            if !matches!(self.algorithm.aggregator, Aggregator::Rfa { .. }) {
                bail!("algorithm.doubling: requires the rfa aggregator");
            }
            if self.corruption.rho >= 0.5 {
                bail!("algorithm.doubling: corruption.rho must be < 0.5");
            }
            if !(p.q > 0.0 && p.q < 0.5) {
                bail!("algorithm.doubling.q: must lie in (0, 0.5)");
            }
            if !(p.delta > 0.0 && p.delta < 1.0) {
                bail!("algorithm.doubling.delta: must lie in (0, 1)");
            }
            if p.base_steps < 2 {
                bail!("algorithm.doubling.base_steps: must be >= 2");
            }
            if p.gm_budget == 0 {
                bail!("algorithm.doubling.gm_budget: must be >= 1");
            }
        }
        Ok(task)
    }
}

/// Parses an aggregator name: `mean`, `rfa`, `median_of_means[:groups]`,
/// `sgd_step[:batch]`.
pub fn parse_aggregator(s: &str) -> Result<Aggregator> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let count = |default: usize| -> Result<usize> {
        match arg {
            None => Ok(default),
            Some(a) => a.parse().with_context(|| format!("aggregator {s:?}: bad count {a:?}")),
        }
    };
    Ok(match name {
        "mean" if arg.is_none() => Aggregator::Mean,
        "rfa" if arg.is_none() => Aggregator::rfa(),
        "median_of_means" => Aggregator::MedianOfMeans { groups: count(3)? },
        "sgd_step" => Aggregator::SgdStep { batch: count(10)? },
        _ => bail!("unknown aggregator {s:?} (expected mean, rfa, median_of_means[:r] or sgd_step[:b])"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"tsak": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"run": {"round": 3}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"task": {"model": "least_squares", "dd": 3}}"#).is_err());
    }

    #[test]
    fn task_block_selects_model() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"task": {"model": "logistic", "classes": 4, "d": 3}}"#).unwrap();
        match c.task {
            TaskConfig::Logistic(t) => assert_eq!((t.classes, t.d, t.devices), (4, 3, 100)),
            _ => panic!("expected logistic"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.algorithm.aggregator = Aggregator::MedianOfMeans { groups: 4 };
        c.algorithm.doubling = Some(DoublingParams::default());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
    }

    #[test]
    fn aggregator_names() {
        assert_eq!(parse_aggregator("mean").unwrap(), Aggregator::Mean);
        assert_eq!(parse_aggregator("median_of_means:5").unwrap(), Aggregator::MedianOfMeans { groups: 5 });
        assert!(parse_aggregator("mean:2").is_err());
        assert!(parse_aggregator("krum").is_err());
    }

    #[test]
    fn validation_catches_bad_batch() {
        let mut c = ExperimentConfig::default();
        c.algorithm.local = LocalSpec::Sgd { batch: 51, epochs: 1 };
        assert!(c.validate().is_err());
        c.algorithm.local = LocalSpec::Sgd { batch: 50, epochs: 1 };
        assert!(c.validate().is_ok());
    }
}
