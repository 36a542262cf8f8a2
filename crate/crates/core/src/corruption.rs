//! Corruption models: which devices are corrupted and what they send.
//!
//! Data poisoning rewrites a device's samples and the device still runs its
//! honest local update. Omniscient corruption replaces the update itself so
//! that the round's weighted mean becomes the negated honest mean.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::scalar::Scalar;
use crate::tasks::{Dataset, Model};

/// Slack used when comparing cumulative weight sums against `rho`, so that
/// e.g. ten weights of 0.1 are not judged to exceed 0.9 after nine of them.
const SELECTION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    #[default]
    None,
    StaticData,
    AdaptiveData,
    Omniscient,
}

/// Corruption kind and level together with the realized corrupted set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub rho: f64,
    pub seed: u64,
    /// Corrupted device ids, ascending.
    pub realized_set: Vec<usize>,
    pub realized_weight: f64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::None,
            rho: 0.0,
            seed: 0,
            realized_set: Vec::new(),
            realized_weight: 0.0,
        }
    }

    /// Draws the corrupted set for devices with weights `alpha`.
    /// `CorruptionKind::None` always yields the empty set.
    pub fn realize<S: Scalar>(kind: CorruptionKind, rho: f64, seed: u64, alpha: &[S]) -> Result<Self> {
        let mut set = if kind == CorruptionKind::None {
            check_rho(rho)?;
            Vec::new()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_corrupted(alpha, rho, &mut rng)?
        };
        set.sort_unstable();
        let realized_weight = set.iter().map(|&k| alpha[k].as_f64()).sum();
        Ok(CorruptionSpec {
            kind,
            rho,
            seed,
            realized_set: set,
            realized_weight,
        })
    }

    pub fn is_corrupted(&self, device: usize) -> bool {
        self.kind != CorruptionKind::None && self.realized_set.binary_search(&device).is_ok()
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid("rho", format!("must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

/// Visits devices in a uniformly random order and adds them until the
/// cumulative weight strictly exceeds `rho`. Returns ids in visiting order.
pub fn select_corrupted<S: Scalar>(alpha: &[S], rho: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    check_rho(rho)?;
    if alpha.is_empty() {
        return Err(Error::Empty("device weights"));
    }
    if rho == 0.0 {
        return Ok(Vec::new());
    }
    let total: f64 = alpha.iter().map(|a| a.as_f64()).sum();
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    let mut cum = 0.0;
    for k in order {
        chosen.push(k);
        cum += alpha[k].as_f64() / total;
        if cum - rho > SELECTION_SLACK {
            break;
        }
    }
    Ok(chosen)
}

/// Feature negation `x -> -x`, labels unchanged. An involution.
pub fn poison_static<S: Scalar>(data: &Dataset<S>) -> Dataset<S> {
    Dataset {
        d: data.d,
        x: data.x.iter().map(|&v| -v).collect(),
        y: data.y.clone(),
    }
}

/// Relabels every sample by the prediction of `-w`: `y -> <x, -w>` for least
/// squares, `y -> argmax_c (-W x)_c` for classification.
pub fn poison_adaptive<S: Scalar>(data: &Dataset<S>, model: &Model, w: &[S]) -> Dataset<S> {
    let d = data.d;
    let y = (0..data.len())
        .map(|i| {
            let x = data.row(i);
            match *model {
                Model::LeastSquares => -dot(w, x),
                Model::Logistic { classes } => {
                    let mut best = 0;
                    let mut best_v = S::neg_infinity();
                    for c in 0..classes {
                        let v = -dot(&w[c * d..(c + 1) * d], x);
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    S::of_usize(best)
                }
            }
        })
        .collect();
    Dataset {
        d,
        x: data.x.clone(),
        y,
    }
}

/// Replacement vectors for the corrupted entries of a round.
///
/// With `A_C` the corrupted weight, every corrupted device sends
/// `-(2 * sum_H alpha_k u_k + sum_C alpha_k u_k) / A_C`, which makes
/// `sum_k alpha_k u_k` over the round equal to its honest value negated.
/// The identity is invariant to rescaling `alpha`, so raw or
/// round-normalized weights give the same result.
/// Returns one vector per `true` entry of `corrupted`, in order.
pub fn omniscient_updates<S: Scalar>(updates: &[Vec<S>], alpha: &[S], corrupted: &[bool]) -> Result<Vec<Vec<S>>> {
    let first = updates.first().ok_or(Error::Empty("round updates"))?;
    if alpha.len() != updates.len() || corrupted.len() != updates.len() {
        return Err(Error::DimensionMismatch {
            expected: updates.len(),
            got: alpha.len().min(corrupted.len()),
        });
    }
    let total: S = alpha.iter().copied().sum();
    let d = first.len();
    let mut honest_sum = vec![S::zero(); d];
    let mut corrupt_sum = vec![S::zero(); d];
    let mut corrupt_weight = S::zero();
    for ((u, &a), &c) in updates.iter().zip(alpha).zip(corrupted) {
        if u.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: u.len() });
        }
        let a = a / total;
        let acc = if c {
            corrupt_weight += a;
            &mut corrupt_sum
        } else {
            &mut honest_sum
        };
        for (s, &v) in acc.iter_mut().zip(u) {
            *s += a * v;
        }
    }
    if !(corrupt_weight > S::zero()) {
        return Err(Error::NoCorruptedWeight);
    }
    let psi: Vec<S> = honest_sum
        .iter()
        .zip(&corrupt_sum)
        .map(|(&h, &c)| -(S::two() * h + c) / corrupt_weight)
        .collect();
    Ok(corrupted.iter().filter(|&&c| c).map(|_| psi.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_rho_selects_nothing() {
        assert!(select_corrupted(&[0.5, 0.5], 0.0, &mut rng(1)).unwrap().is_empty());
    }

    #[test]
    fn equal_weights_need_strict_excess() {
        for seed in 0..20 {
            assert_eq!(select_corrupted(&[0.25f64; 4], 0.25, &mut rng(seed)).unwrap().len(), 2);
            assert_eq!(select_corrupted(&[0.1f64; 10], 0.9, &mut rng(seed)).unwrap().len(), 10);
        }
    }

    #[test]
    fn rho_out_of_range_is_rejected() {
        assert!(select_corrupted(&[1.0], 1.0, &mut rng(0)).is_err());
        assert!(select_corrupted(&[1.0], -0.1, &mut rng(0)).is_err());
    }

    #[test]
    fn selection_is_deterministic() {
        let a: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let s1 = select_corrupted(&a, 0.3, &mut rng(5)).unwrap();
        let s2 = select_corrupted(&a, 0.3, &mut rng(5)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn realize_with_kind_none_is_empty() {
        let spec = CorruptionSpec::realize(CorruptionKind::None, 0.3, 1, &[0.5f64, 0.5]).unwrap();
        assert!(spec.realized_set.is_empty());
        assert!(!spec.is_corrupted(0));
    }

    #[test]
    fn omniscient_hand_example() {
        let updates = vec![vec![1.0], vec![3.0], vec![2.0]];
        let out = omniscient_updates(&updates, &[0.4, 0.4, 0.2], &[false, false, true]).unwrap();
        assert!((out[0][0] + 18.0f64).abs() < 1e-12);
        let mean = 0.4 * 1.0 + 0.4 * 3.0 + 0.2 * out[0][0];
        assert!((mean + 2.0f64).abs() < 1e-12);
    }

    #[test]
    fn omniscient_all_corrupted_negates_each() {
        let updates = vec![vec![1.0, -2.0], vec![1.0, -2.0]];
        let out = omniscient_updates(&updates, &[0.3, 0.7], &[true, true]).unwrap();
        for v in out {
            assert!((v[0] + 1.0f64).abs() < 1e-12 && (v[1] - 2.0f64).abs() < 1e-12);
        }
    }

    #[test]
    fn omniscient_without_corrupted_weight_is_flagged() {
        let updates = vec![vec![1.0f64]];
        assert_eq!(omniscient_updates(&updates, &[1.0], &[false]), Err(Error::NoCorruptedWeight));
    }

    #[test]
    fn static_poison_is_an_involution() {
        let data = Dataset::new(2, vec![0.0, 1.0, -3.0, 2.5], vec![1.0, 2.0]).unwrap();
        let once = poison_static(&data);
        assert_eq!(once.row(0), &[0.0, -1.0]);
        assert_eq!(once.y, data.y);
        assert_eq!(poison_static(&once), data);
    }

    #[test]
    fn adaptive_poison_at_zero_model_zeroes_labels() {
        let data = Dataset::new(2, vec![1.0, 1.0, -3.0, 2.5], vec![1.0, 2.0]).unwrap();
        let out = poison_adaptive(&data, &Model::LeastSquares, &[0.0, 0.0]);
        assert!(out.y.iter().all(|&v| v == 0.0));
        let w = [0.5, -1.0];
        assert_eq!(
            poison_adaptive(&data, &Model::LeastSquares, &w),
            poison_adaptive(&data, &Model::LeastSquares, &w)
        );
    }
}
