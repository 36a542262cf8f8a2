#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rfa_core::geomed::WeightedPointSet;

/// Seeded random weighted point set: `m` standard Gaussian points in `R^d`,
/// weights uniform on `[0.1, 1)` before normalization.
pub fn random_instance(seed: u64, m: usize, d: usize) -> WeightedPointSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..m)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let weights = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    WeightedPointSet::new(points, weights).unwrap()
}

/// True when all points lie on one line (always the case for `d = 1`).
pub fn is_collinear(set: &WeightedPointSet<f64>) -> bool {
    let p = set.points();
    let base = &p[0];
    let dirs: Vec<Vec<f64>> = p[1..]
        .iter()
        .map(|q| q.iter().zip(base).map(|(a, b)| a - b).collect())
        .filter(|v: &Vec<f64>| v.iter().any(|x| x.abs() > 1e-12))
        .collect();
    let Some(u) = dirs.first() else { return true };
    dirs.iter().all(|v| {
        // |u|^2 |v|^2 - (u.v)^2 is the squared area spanned by u and v
        let uu: f64 = u.iter().map(|x| x * x).sum();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        uu * vv - uv * uv <= 1e-12 * uu * vv
    })
}

/// The `i`-th instance of the 100-instance benchmark: `m` in `[3, 20]` and
/// `d` in `[1, 5]`, redrawn until the points are not collinear.
pub fn benchmark_instance(i: u64) -> WeightedPointSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + i);
    loop {
        let m = rng.random_range(3..=20);
        let d = rng.random_range(1..=5);
        let set = random_instance(rng.random(), m, d);
        if !is_collinear(&set) {
            return set;
        }
    }
}

/// Straight-line re-summation of `sum_k alpha_k |z - w_k|`.
pub fn naive_objective(z: &[f64], set: &WeightedPointSet<f64>) -> f64 {
    let mut total = 0.0;
    for k in 0..set.len() {
        let mut sq = 0.0;
        for i in 0..z.len() {
            let diff = z[i] - set.points()[k][i];
            sq += diff * diff;
        }
        total += set.weights()[k] * sq.sqrt();
    }
    total
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
