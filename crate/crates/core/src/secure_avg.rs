//! Simulated secure average oracle.
//!
//! The server-facing surface is a single weighted mean
//! `sum_k beta_k w_k / sum_k beta_k`; individual contributions never leave
//! [`SecureAverageOracle::secure_average`]. Every call is counted together
//! with an abstract communication cost of `m * d + m^2` units.
//!
//! In [`OracleMode::Masked`] each device sends `(beta_k w_k, beta_k)` blinded
//! by pairwise masks: for every ordered pair `j < k` a mask is drawn from a
//! seeded generator, device `j` adds it and device `k` subtracts it, so the
//! masks cancel in the sum the server receives.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OracleMode {
    #[default]
    Plain,
    /// Pairwise additive masking. Masks are uniform on `[-scale, scale]`.
    Masked { seed: u64, scale: f64 },
}

/// One device's input to the oracle: a vector and its positive weight.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a, S> {
    pub value: &'a [S],
    pub weight: S,
}

impl<'a, S: Scalar> Contribution<'a, S> {
    pub fn new(value: &'a [S], weight: S) -> Self {
        Contribution { value, weight }
    }
}

#[derive(Debug, Default)]
pub struct SecureAverageOracle {
    mode: OracleMode,
    calls: AtomicU64,
    cost_units: AtomicU64,
}

impl SecureAverageOracle {
    pub fn new(mode: OracleMode) -> Self {
        SecureAverageOracle {
            mode,
            calls: AtomicU64::new(0),
            cost_units: AtomicU64::new(0),
        }
    }

    pub fn plain() -> Self {
        Self::new(OracleMode::Plain)
    }

    pub fn masked(seed: u64) -> Self {
        Self::new(OracleMode::Masked { seed, scale: 1.0 })
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Accumulated communication cost, in abstract units.
    pub fn bytes_modeled(&self) -> u64 {
        self.cost_units.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.cost_units.store(0, Ordering::SeqCst);
    }

    /// Weighted mean of the contributions, reduced in contribution order.
    pub fn secure_average<S: Scalar>(&self, contribs: &[Contribution<'_, S>]) -> Result<Vec<S>> {
        let first = contribs.first().ok_or(Error::Empty("secure_average contributions"))?;
        let d = first.value.len();
        if d == 0 {
            return Err(Error::Empty("contribution vector"));
        }
        for (index, c) in contribs.iter().enumerate() {
            if c.value.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.value.len(),
                });
            }
            if !(c.weight > S::zero()) || !c.weight.is_finite() {
                return Err(Error::NonPositiveWeight {
                    index,
                    value: c.weight.as_f64(),
                });
            }
        }

        let m = contribs.len() as u64;
        let call_index = self.calls.fetch_add(1, Ordering::SeqCst);
        self.cost_units
            .fetch_add(m * d as u64 + m * m, Ordering::SeqCst);

        let (sum, total) = match self.mode {
            OracleMode::Plain => plain_sums(contribs, d),
            OracleMode::Masked { seed, scale } => masked_sums(contribs, d, seed, scale, call_index),
        };
        Ok(sum.into_iter().map(|v| v / total).collect())
    }
}

fn plain_sums<S: Scalar>(contribs: &[Contribution<'_, S>], d: usize) -> (Vec<S>, S) {
    let mut sum = vec![S::zero(); d];
    let mut total = S::zero();
    for c in contribs {
        for (acc, &v) in sum.iter_mut().zip(c.value) {
            *acc += c.weight * v;
        }
        total += c.weight;
    }
    (sum, total)
}

fn masked_sums<S: Scalar>(
    contribs: &[Contribution<'_, S>],
    d: usize,
    seed: u64,
    scale: f64,
    call_index: u64,
) -> (Vec<S>, S) {
    let m = contribs.len();
    // Each device's outgoing message: [beta_k * w_k, beta_k].
    let mut messages: Vec<Vec<S>> = contribs
        .iter()
        .map(|c| {
            let mut msg: Vec<S> = c.value.iter().map(|&v| c.weight * v).collect();
            msg.push(c.weight);
            msg
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call_index);
    let mut mask = vec![S::zero(); d + 1];
    for j in 0..m {
        for k in j + 1..m {
            for r in mask.iter_mut() {
                *r = S::of(rng.random_range(-scale..=scale));
            }
            for (x, &r) in messages[j].iter_mut().zip(&mask) {
                *x += r;
            }
            for (x, &r) in messages[k].iter_mut().zip(&mask) {
                *x -= r;
            }
        }
    }

    // Server side: only the sum of blinded messages is used.
    let mut acc = vec![S::zero(); d + 1];
    for msg in &messages {
        for (a, &x) in acc.iter_mut().zip(msg) {
            *a += x;
        }
    }
    let total = acc.pop().expect("message has weight slot");
    (acc, total)
}
