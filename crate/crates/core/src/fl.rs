//! Federated training loop with pluggable local updates and aggregators.
//!
//! Each round samples `m` devices uniformly without replacement, broadcasts the
//! server model, runs the local update on every selected device, lets corrupted
//! devices tamper with their contribution, and aggregates through the secure
//! average oracle. Metrics are always evaluated on the uncorrupted data.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{omniscient_updates, poison_adaptive, poison_static, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::geomed::{
    smoothed_weiszfeld, GmResult, WeightedPointSet, WeiszfeldConfig, DEFAULT_NU, DEFAULT_REL_TOL, FEDERATED_BUDGET,
};
use crate::scalar::Scalar;
use crate::secure_avg::{Contribution, OracleMode, SecureAverageOracle};
use crate::tasks::{Dataset, FederatedTask, Model};

/// Training loss above this (or non-finite) halts a run.
pub const DIVERGENCE_CEILING: f64 = 1e12;
/// A run whose training loss exceeds this multiple of its initial value is
/// reported as diverged.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// `gamma_t = gamma0 * decay^floor(t / step)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub gamma0: f64,
    pub decay: f64,
    pub step: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            gamma0: 0.1,
            decay: 1.0,
            step: 1,
        }
    }
}

impl LrSchedule {
    pub fn constant(gamma: f64) -> Self {
        LrSchedule {
            gamma0: gamma,
            ..Default::default()
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        self.gamma0 * self.decay.powi((t / self.step) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 >= 0.0) || !self.gamma0.is_finite() {
            return Err(Error::invalid("gamma0", "must be finite and >= 0"));
        }
        if !(self.decay > 0.0) || !self.decay.is_finite() {
            return Err(Error::invalid("decay", "must be finite and > 0"));
        }
        if self.step == 0 {
            return Err(Error::invalid("step", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LocalSpec {
    /// `ceil(n_k * epochs / batch)` minibatch steps, batches drawn without replacement.
    Sgd { batch: usize, epochs: usize },
    /// `steps` single-sample SGD steps, returning the mean of the latter half of iterates.
    TailAvgSgd { steps: usize },
}

impl Default for LocalSpec {
    fn default() -> Self {
        LocalSpec::Sgd { batch: 10, epochs: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Aggregator {
    /// Weighted mean (FedAvg), one oracle call.
    Mean,
    /// Approximate geometric median by smoothed Weiszfeld.
    Rfa { nu: f64, budget: usize, rel_tol: f64 },
    /// Geometric median of `groups` group means; the median itself is computed
    /// by the server on the group means.
    MedianOfMeans { groups: usize },
    /// Every device takes a single minibatch gradient step of size `batch`
    /// (ignoring the local spec) and the results are averaged.
    SgdStep { batch: usize },
}

impl Aggregator {
    pub fn rfa() -> Self {
        Aggregator::Rfa {
            nu: DEFAULT_NU,
            budget: FEDERATED_BUDGET,
            rel_tol: DEFAULT_REL_TOL,
        }
    }

    fn weiszfeld<S: Scalar>(nu: f64, budget: usize, rel_tol: f64) -> Result<WeiszfeldConfig<S>> {
        Ok(WeiszfeldConfig::federated()
            .with_budget(budget)
            .with_rel_tol(S::of(rel_tol))
            .with_nu(S::of(nu))?)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Aggregator::Mean => Ok(()),
            Aggregator::Rfa { nu, budget, rel_tol } => {
                if !(nu > 0.0) {
                    return Err(Error::invalid("nu", "must be > 0"));
                }
                if budget == 0 {
                    return Err(Error::ZeroBudget);
                }
                if !(rel_tol >= 0.0) {
                    return Err(Error::invalid("rel_tol", "must be >= 0"));
                }
                Ok(())
            }
            Aggregator::MedianOfMeans { groups } if groups == 0 => Err(Error::invalid("groups", "must be >= 1")),
            Aggregator::SgdStep { batch } if batch == 0 => Err(Error::invalid("batch", "must be >= 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub devices_per_round: usize,
    pub local: LocalSpec,
    pub lr: LrSchedule,
    pub aggregator: Aggregator,
    pub oracle: OracleMode,
    /// Run local updates on the rayon pool. Results are identical either way.
    pub parallel: bool,
    /// Stop once the training loss is non-finite or above the ceiling.
    pub halt_on_divergence: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            devices_per_round: 10,
            local: LocalSpec::default(),
            lr: LrSchedule::default(),
            aggregator: Aggregator::Mean,
            oracle: OracleMode::Plain,
            parallel: false,
            halt_on_divergence: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// 1-based; the metrics describe the model after this many aggregations.
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub dist_to_opt_sq: Option<f64>,
    pub oracle_calls: u64,
    pub selected: Vec<usize>,
    pub corrupted_selected: usize,
    pub local_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "S: Scalar")]
pub struct RunOutput<S> {
    pub initial_train_loss: f64,
    pub initial_test_loss: f64,
    pub initial_dist_to_opt_sq: Option<f64>,
    pub traces: Vec<RoundTrace>,
    pub final_w: Vec<S>,
    /// Training loss went non-finite, above the ceiling, or above
    /// `DIVERGENCE_FACTOR` times its initial value at some round.
    pub diverged: bool,
    /// The run stopped before its last round.
    pub halted: bool,
    pub total_oracle_calls: u64,
    pub bytes_modeled: u64,
}

impl<S> RunOutput<S> {
    pub fn final_train_loss(&self) -> f64 {
        self.traces.last().map_or(self.initial_train_loss, |t| t.train_loss)
    }
}

/// Uniformly random `m`-subset of `0..k`, ascending.
pub fn sample_devices(k: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if m == 0 || m > k {
        return Err(Error::invalid(
            "devices_per_round",
            format!("must lie in [1, {k}], got {m}"),
        ));
    }
    let mut s = index::sample(rng, k, m).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// Independent stream for `(seed, round, device)`.
pub fn device_rng(seed: u64, round: usize, device: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(round as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(device as u64).to_le_bytes());
    key[24] = 1;
    ChaCha8Rng::from_seed(key)
}

fn server_rng(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[24] = 2;
    ChaCha8Rng::from_seed(key)
}

/// Minibatch SGD for `ceil(n * epochs / batch)` steps.
pub fn local_update_sgd<S: Scalar>(
    model: &Model,
    data: &Dataset<S>,
    w0: &[S],
    gamma: S,
    batch: usize,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<S>> {
    if data.is_empty() {
        return Err(Error::Empty("device dataset"));
    }
    if batch == 0 || batch > data.len() {
        return Err(Error::invalid("batch", format!("must lie in [1, {}], got {batch}", data.len())));
    }
    let steps = (data.len() * epochs).div_ceil(batch);
    let mut w = w0.to_vec();
    for _ in 0..steps {
        let idx = index::sample(rng, data.len(), batch).into_vec();
        let g = model.batch_gradient(&w, data, &idx);
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= gamma * gi;
        }
    }
    Ok(w)
}

/// Single-sample SGD for `steps` steps; returns the mean of iterates
/// `ceil(steps/2)+1 ..= steps`.
pub fn local_update_tail_avg_sgd<S: Scalar>(
    model: &Model,
    data: &Dataset<S>,
    w0: &[S],
    gamma: S,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<S>> {
    if data.is_empty() {
        return Err(Error::Empty("device dataset"));
    }
    if steps < 2 {
        return Err(Error::invalid("steps", "tail averaging needs at least 2 steps"));
    }
    let first_kept = steps.div_ceil(2) + 1;
    let kept = steps - first_kept + 1;
    let mut w = w0.to_vec();
    let mut avg = vec![S::zero(); w.len()];
    let mut g = vec![S::zero(); w.len()];
    for step in 1..=steps {
        let i = rng.random_range(0..data.len());
        g.iter_mut().for_each(|v| *v = S::zero());
        model.add_sample_gradient(&w, data.row(i), data.y[i], S::one(), &mut g);
        for (wi, &gi) in w.iter_mut().zip(&g) {
            *wi -= gamma * gi;
        }
        if step >= first_kept {
            for (a, &wi) in avg.iter_mut().zip(&w) {
                *a += wi;
            }
        }
    }
    let n = S::of_usize(kept);
    avg.iter_mut().for_each(|a| *a /= n);
    Ok(avg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate<S> {
    pub w: Vec<S>,
    /// Solver output for the geometric-median aggregators.
    pub gm: Option<GmResult<S>>,
}

/// Combines the round's updates. `alpha` is renormalized here.
pub fn aggregate<S: Scalar>(
    updates: &[Vec<S>],
    alpha: &[S],
    kind: &Aggregator,
    oracle: &SecureAverageOracle,
) -> Result<Aggregate<S>> {
    if updates.is_empty() {
        return Err(Error::Empty("round updates"));
    }
    if alpha.len() != updates.len() {
        return Err(Error::DimensionMismatch {
            expected: updates.len(),
            got: alpha.len(),
        });
    }
    kind.validate()?;
    match *kind {
        Aggregator::Mean | Aggregator::SgdStep { .. } => {
            let contribs: Vec<_> = updates.iter().zip(alpha).map(|(u, &a)| Contribution::new(u, a)).collect();
            Ok(Aggregate {
                w: oracle.secure_average(&contribs)?,
                gm: None,
            })
        }
        Aggregator::Rfa { nu, budget, rel_tol } => {
            let set = WeightedPointSet::new(updates.to_vec(), alpha.to_vec())?;
            let res = smoothed_weiszfeld(&set, &Aggregator::weiszfeld(nu, budget, rel_tol)?, None, oracle)?;
            Ok(Aggregate {
                w: res.z.clone(),
                gm: Some(res),
            })
        }
        Aggregator::MedianOfMeans { groups } => {
            let r = groups.min(updates.len());
            let mut means = Vec::with_capacity(r);
            let mut weights = Vec::with_capacity(r);
            for g in 0..r {
                let contribs: Vec<_> = (g..updates.len())
                    .step_by(r)
                    .map(|i| Contribution::new(&updates[i][..], alpha[i]))
                    .collect();
                weights.push(contribs.iter().map(|c| c.weight).sum::<S>());
                means.push(oracle.secure_average(&contribs)?);
            }
            let set = WeightedPointSet::new(means, weights)?;
            let server_side = SecureAverageOracle::plain();
            let res = smoothed_weiszfeld(&set, &WeiszfeldConfig::standalone(), None, &server_side)?;
            Ok(Aggregate {
                w: res.z.clone(),
                gm: Some(res),
            })
        }
    }
}

fn evaluate<S: Scalar>(task: &FederatedTask<S>, w: &[S]) -> Result<(f64, f64, Option<f64>)> {
    Ok((
        task.train_loss(w)?.as_f64(),
        task.test_loss(w)?.as_f64(),
        task.dist_to_opt_sq(w).map(Scalar::as_f64),
    ))
}

/// Per-round choices that `run_federated` fixes but the doubling runner varies.
struct Schedule<'a> {
    local: &'a dyn Fn(usize) -> LocalSpec,
    lr: &'a dyn Fn(usize) -> f64,
}

/// Runs `rounds` rounds of federated training from `w = 0`.
pub fn run_federated<S: Scalar>(
    task: &FederatedTask<S>,
    corruption: &CorruptionSpec,
    config: &RoundConfig,
    rounds: usize,
    seed: u64,
) -> Result<RunOutput<S>> {
    config.lr.validate()?;
    let local = config.local;
    let lr = config.lr;
    run_rounds(
        task,
        corruption,
        config,
        rounds,
        seed,
        Schedule {
            local: &|_| local,
            lr: &|t| lr.at(t),
        },
    )
}

fn run_rounds<S: Scalar>(
    task: &FederatedTask<S>,
    corruption: &CorruptionSpec,
    config: &RoundConfig,
    rounds: usize,
    seed: u64,
    schedule: Schedule<'_>,
) -> Result<RunOutput<S>> {
    let k_total = task.partition.num_devices();
    let m = config.devices_per_round;
    if m == 0 || m > k_total {
        return Err(Error::invalid(
            "devices_per_round",
            format!("must lie in [1, {k_total}], got {m}"),
        ));
    }
    config.aggregator.validate()?;
    if let Some(&k) = corruption.realized_set.iter().find(|&&k| k >= k_total) {
        return Err(Error::invalid("corruption", format!("device {k} does not exist")));
    }

    let model = task.model;
    let oracle = SecureAverageOracle::new(config.oracle);
    let mut rng = server_rng(seed);
    let mut w = vec![S::zero(); task.num_params()];

    let static_poisoned: Vec<Option<Dataset<S>>> = (0..k_total)
        .map(|k| {
            (corruption.kind == CorruptionKind::StaticData && corruption.is_corrupted(k))
                .then(|| poison_static(&task.partition.devices[k]))
        })
        .collect();

    let (initial_train_loss, initial_test_loss, initial_dist_to_opt_sq) = evaluate(task, &w)?;
    let mut traces = Vec::with_capacity(rounds);
    let mut diverged = false;
    let mut halted = false;

    for t in 0..rounds {
        let selected = sample_devices(k_total, m, &mut rng)?;
        let n_sel: usize = selected.iter().map(|&k| task.partition.devices[k].len()).sum();
        let alpha: Vec<S> = selected
            .iter()
            .map(|&k| S::of_usize(task.partition.devices[k].len()) / S::of_usize(n_sel))
            .collect();
        let corrupted: Vec<bool> = selected.iter().map(|&k| corruption.is_corrupted(k)).collect();
        let local = (schedule.local)(t);
        let gamma = S::of((schedule.lr)(t));

        let run_device = |&k: &usize| -> Result<Vec<S>> {
            let honest = &task.partition.devices[k];
            let adaptive;
            let data = match corruption.kind {
                CorruptionKind::StaticData if corruption.is_corrupted(k) => {
                    static_poisoned[k].as_ref().expect("prepared for corrupted devices")
                }
                CorruptionKind::AdaptiveData if corruption.is_corrupted(k) => {
                    adaptive = poison_adaptive(honest, &model, &w);
                    &adaptive
                }
                _ => honest,
            };
            let mut drng = device_rng(seed, t, k);
            match (config.aggregator, local) {
                (Aggregator::SgdStep { batch }, _) => {
                    let batch = batch.min(data.len());
                    let idx = index::sample(&mut drng, data.len(), batch).into_vec();
                    let g = model.batch_gradient(&w, data, &idx);
                    Ok(w.iter().zip(g).map(|(&wi, gi)| wi - gamma * gi).collect())
                }
                (_, LocalSpec::Sgd { batch, epochs }) => {
                    local_update_sgd(&model, data, &w, gamma, batch, epochs, &mut drng)
                }
                (_, LocalSpec::TailAvgSgd { steps }) => {
                    local_update_tail_avg_sgd(&model, data, &w, gamma, steps, &mut drng)
                }
            }
        };
        let mut updates: Vec<Vec<S>> = if config.parallel {
            selected.par_iter().map(run_device).collect::<Result<_>>()?
        } else {
            selected.iter().map(run_device).collect::<Result<_>>()?
        };

        let corrupted_selected = corrupted.iter().filter(|&&c| c).count();
        if corruption.kind == CorruptionKind::Omniscient && corrupted_selected > 0 {
            let replacements = omniscient_updates(&updates, &alpha, &corrupted)?;
            let slots = corrupted.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i);
            for (i, psi) in slots.zip(replacements) {
                updates[i] = psi;
            }
        }

        let calls_before = oracle.call_count();
        w = aggregate(&updates, &alpha, &config.aggregator, &oracle)?.w;
        let oracle_calls = oracle.call_count() - calls_before;

        let (train_loss, test_loss, dist_to_opt_sq) = evaluate(task, &w)?;
        let blown_up = !train_loss.is_finite() || train_loss > DIVERGENCE_CEILING;
        if blown_up || train_loss > DIVERGENCE_FACTOR * initial_train_loss {
            diverged = true;
        }
        traces.push(RoundTrace {
            round: t + 1,
            train_loss,
            test_loss,
            dist_to_opt_sq,
            oracle_calls,
            selected,
            corrupted_selected,
            local_steps: match (config.aggregator, local) {
                (Aggregator::SgdStep { .. }, _) => 1,
                (_, LocalSpec::TailAvgSgd { steps }) => steps,
                (_, LocalSpec::Sgd { .. }) => 0,
            },
        });
        if blown_up && config.halt_on_divergence {
            halted = t + 1 < rounds;
            break;
        }
    }

    Ok(RunOutput {
        initial_train_loss,
        initial_test_loss,
        initial_dist_to_opt_sq,
        traces,
        final_w: w,
        diverged,
        halted,
        total_oracle_calls: oracle.call_count(),
        bytes_modeled: oracle.bytes_modeled(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoublingConfig {
    pub devices_per_round: usize,
    /// Local steps in the first round, `N`.
    pub base_steps: usize,
    /// `N_t = 2^t N` when true, `N_t = N` otherwise.
    pub doubling: bool,
    /// Failure probability of a single honest local update.
    pub q: f64,
    /// Overall failure probability of the guarantee.
    pub delta: f64,
    pub gm_budget: usize,
    pub gm_rel_tol: f64,
    pub oracle: OracleMode,
    pub parallel: bool,
}

impl Default for DoublingConfig {
    fn default() -> Self {
        DoublingConfig {
            devices_per_round: 10,
            base_steps: 100,
            doubling: true,
            q: 0.01,
            delta: 0.01,
            gm_budget: 200,
            gm_rel_tol: 1e-14,
            oracle: OracleMode::Plain,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "S: Scalar")]
pub struct DoublingReport<S> {
    pub run: RunOutput<S>,
    pub gamma: f64,
    /// Local step count used in each round.
    pub step_counts: Vec<usize>,
    /// `q + rho (1 - q) + (2 - q) sqrt(log(3T/delta) / (2m))`
    pub theta: f64,
    /// `(1 - theta) / sqrt(1 - 2 theta)`, when `theta < 1/2`.
    pub c_theta: Option<f64>,
    /// `4 kappa log(4 C_theta^2 kappa / q)`, when `theta < 1/2`.
    pub required_base_steps: Option<f64>,
}

/// Confidence parameters of the doubling schedule's guarantee.
pub fn doubling_constants(q: f64, rho: f64, rounds: usize, delta: f64, m: usize, kappa: f64) -> (f64, Option<f64>, Option<f64>) {
    let theta = q + rho * (1.0 - q) + (2.0 - q) * ((3.0 * rounds.max(1) as f64 / delta).ln() / (2.0 * m as f64)).sqrt();
    if theta < 0.5 {
        let c = (1.0 - theta) / (1.0 - 2.0 * theta).sqrt();
        (theta, Some(c), Some(4.0 * kappa * (4.0 * c * c * kappa / q).ln()))
    } else {
        (theta, None, None)
    }
}

/// Least-squares training with tail-averaged SGD of length `N_t` at step size
/// `1 / (2 R^2)` and a tightly solved geometric-median aggregate.
pub fn run_rfa_doubling<S: Scalar>(
    task: &FederatedTask<S>,
    corruption: &CorruptionSpec,
    config: &DoublingConfig,
    rounds: usize,
    seed: u64,
) -> Result<DoublingReport<S>> {
    let ls = task
        .ls
        .as_ref()
        .ok_or_else(|| Error::invalid("task", "doubling schedule needs a least-squares task"))?;
    if !(corruption.rho < 0.5) {
        return Err(Error::invalid("rho", "must be < 1/2"));
    }
    if !(config.q > 0.0 && config.q < 0.5) {
        return Err(Error::invalid("q", "must lie in (0, 1/2)"));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(Error::invalid("delta", "must lie in (0, 1)"));
    }
    if config.base_steps < 2 {
        return Err(Error::invalid("base_steps", "must be >= 2"));
    }
    let r = ls.r_bound.as_f64();
    let gamma = 1.0 / (2.0 * r * r);
    let steps_at = |t: usize| -> usize {
        if config.doubling {
            config.base_steps.saturating_mul(1usize.checked_shl(t as u32).unwrap_or(usize::MAX))
        } else {
            config.base_steps
        }
    };
    let round_config = RoundConfig {
        devices_per_round: config.devices_per_round,
        local: LocalSpec::TailAvgSgd { steps: config.base_steps },
        lr: LrSchedule::constant(gamma),
        aggregator: Aggregator::Rfa {
            nu: DEFAULT_NU,
            budget: config.gm_budget,
            rel_tol: config.gm_rel_tol,
        },
        oracle: config.oracle,
        parallel: config.parallel,
        halt_on_divergence: true,
    };
    let run = run_rounds(
        task,
        corruption,
        &round_config,
        rounds,
        seed,
        Schedule {
            local: &|t| LocalSpec::TailAvgSgd { steps: steps_at(t) },
            lr: &|_| gamma,
        },
    )?;
    let (theta, c_theta, required_base_steps) = doubling_constants(
        config.q,
        corruption.rho,
        rounds,
        config.delta,
        config.devices_per_round,
        ls.kappa.as_f64(),
    );
    Ok(DoublingReport {
        step_counts: run.traces.iter().map(|t| t.local_steps).collect(),
        run,
        gamma,
        theta,
        c_theta,
        required_base_steps,
    })
}
