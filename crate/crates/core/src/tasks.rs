//! Synthetic learning problems and the federated partition they live on.
//!
//! The main task is well-specified least squares `y = <w*, x> + sigma * e`
//! with features bounded by `R`. A multinomial logistic task is provided for
//! qualitative runs; it has no known optimum.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, dot, norm, symmetric_eigenvalues};
use crate::scalar::Scalar;

pub const TASK_SCHEMA_VERSION: u32 = 1;

/// Row-major sample store. For classification `y` holds the class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Dataset<S> {
    pub d: usize,
    pub x: Vec<S>,
    pub y: Vec<S>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(d: usize, x: Vec<S>, y: Vec<S>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d", "must be >= 1"));
        }
        if x.len() != y.len() * d {
            return Err(Error::DimensionMismatch {
                expected: y.len() * d,
                got: x.len(),
            });
        }
        Ok(Dataset { d, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset<S> {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Dataset { d: self.d, x, y }
    }

    pub fn concat(parts: &[&Dataset<S>]) -> Result<Dataset<S>> {
        let first = parts.first().ok_or(Error::Empty("datasets to concatenate"))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for p in parts {
            if p.d != first.d {
                return Err(Error::DimensionMismatch {
                    expected: first.d,
                    got: p.d,
                });
            }
            x.extend_from_slice(&p.x);
            y.extend_from_slice(&p.y);
        }
        Ok(Dataset { d: first.d, x, y })
    }

    /// `(1/n) sum_i x_i x_i^T`, row-major `d x d`.
    pub fn second_moment(&self) -> Vec<S> {
        let d = self.d;
        let mut m = vec![S::zero(); d * d];
        for i in 0..self.len() {
            let r = self.row(i);
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] += r[a] * r[b];
                }
            }
        }
        let n = S::of_usize(self.len().max(1));
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn max_feature_norm(&self) -> S {
        (0..self.len()).fold(S::zero(), |acc, i| acc.max(norm(self.row(i))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Model {
    /// Square loss `0.5 * (y - <w, x>)^2`.
    LeastSquares,
    /// Softmax cross-entropy; `w` is a row-major `classes x d` matrix.
    Logistic { classes: usize },
}

impl Model {
    pub fn num_params(&self, d: usize) -> usize {
        match *self {
            Model::LeastSquares => d,
            Model::Logistic { classes } => classes * d,
        }
    }

    pub fn sample_loss<S: Scalar>(&self, w: &[S], x: &[S], y: S) -> S {
        match *self {
            Model::LeastSquares => {
                let r = y - dot(w, x);
                S::half() * r * r
            }
            Model::Logistic { classes } => {
                let logits = logits(w, x, classes);
                let top = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let lse = top + logits.iter().map(|&z| (z - top).exp()).sum::<S>().ln();
                lse - logits[class_of(y)]
            }
        }
    }

    /// `out += scale * grad_w loss(w; x, y)`
    pub fn add_sample_gradient<S: Scalar>(&self, w: &[S], x: &[S], y: S, scale: S, out: &mut [S]) {
        match *self {
            Model::LeastSquares => {
                let c = scale * (dot(w, x) - y);
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o += c * xi;
                }
            }
            Model::Logistic { classes } => {
                let d = x.len();
                let p = softmax(&logits(w, x, classes));
                let label = class_of(y);
                for c in 0..classes {
                    let coef = scale * (p[c] - if c == label { S::one() } else { S::zero() });
                    for (o, &xi) in out[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *o += coef * xi;
                    }
                }
            }
        }
    }

    /// Mean loss over the dataset.
    pub fn loss<S: Scalar>(&self, w: &[S], data: &Dataset<S>) -> Result<S> {
        self.check(w, data)?;
        let total = (0..data.len()).fold(S::zero(), |acc, i| acc + self.sample_loss(w, data.row(i), data.y[i]));
        Ok(total / S::of_usize(data.len()))
    }

    /// Gradient of the mean loss over the dataset.
    pub fn gradient<S: Scalar>(&self, w: &[S], data: &Dataset<S>) -> Result<Vec<S>> {
        self.check(w, data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        Ok(self.batch_gradient(w, data, &idx))
    }

    /// Mean gradient over the rows in `idx` (which must be nonempty and in range).
    pub fn batch_gradient<S: Scalar>(&self, w: &[S], data: &Dataset<S>, idx: &[usize]) -> Vec<S> {
        let mut g = vec![S::zero(); w.len()];
        let scale = S::one() / S::of_usize(idx.len());
        for &i in idx {
            self.add_sample_gradient(w, data.row(i), data.y[i], scale, &mut g);
        }
        g
    }

    fn check<S: Scalar>(&self, w: &[S], data: &Dataset<S>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let p = self.num_params(data.d);
        if w.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: w.len(),
            });
        }
        Ok(())
    }
}

fn class_of<S: Scalar>(y: S) -> usize {
    y.to_usize().expect("class label is a nonnegative integer")
}

fn logits<S: Scalar>(w: &[S], x: &[S], classes: usize) -> Vec<S> {
    let d = x.len();
    (0..classes).map(|c| dot(&w[c * d..(c + 1) * d], x)).collect()
}

fn softmax<S: Scalar>(z: &[S]) -> Vec<S> {
    let top = z.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<S> = z.iter().map(|&v| (v - top).exp()).collect();
    let s: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Constants of the least-squares setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SyntheticLsTask<S> {
    pub d: usize,
    pub w_star: Vec<S>,
    /// Feature norm bound `R`: every generated feature satisfies `|x| <= R`.
    pub r_bound: S,
    pub sigma: S,
    /// Extreme eigenvalues of the pooled training second-moment matrix.
    pub mu: S,
    pub l_smooth: S,
    /// `R^2 / mu`
    pub kappa: S,
}

/// Devices and their weights `alpha_k = n_k / sum_j n_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FederatedPartition<S> {
    pub devices: Vec<Dataset<S>>,
    pub alpha: Vec<S>,
}

impl<S: Scalar> FederatedPartition<S> {
    pub fn from_devices(devices: Vec<Dataset<S>>) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::Empty("device list"));
        }
        if let Some(k) = devices.iter().position(|dv| dv.is_empty()) {
            return Err(Error::invalid("devices", format!("device {k} has no samples")));
        }
        let total: usize = devices.iter().map(Dataset::len).sum();
        let alpha = devices
            .iter()
            .map(|dv| S::of_usize(dv.len()) / S::of_usize(total))
            .collect();
        Ok(FederatedPartition { devices, alpha })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn total_samples(&self) -> usize {
        self.devices.iter().map(Dataset::len).sum()
    }

    pub fn pooled(&self) -> Dataset<S> {
        let parts: Vec<&Dataset<S>> = self.devices.iter().collect();
        Dataset::concat(&parts).expect("partition is nonempty with uniform d")
    }
}

/// A complete learning problem: model, partitioned training data, held-out
/// test data and, for least squares, the empirical optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FederatedTask<S> {
    pub schema_version: u32,
    pub model: Model,
    pub partition: FederatedPartition<S>,
    pub test: Dataset<S>,
    pub optimum: Option<Vec<S>>,
    pub ls: Option<SyntheticLsTask<S>>,
}

impl<S: Scalar> FederatedTask<S> {
    pub fn dim(&self) -> usize {
        self.partition.devices[0].d
    }

    pub fn num_params(&self) -> usize {
        self.model.num_params(self.dim())
    }

    /// `F(w) = sum_k alpha_k F_k(w)` on the stored (uncorrupted) training data.
    pub fn train_loss(&self, w: &[S]) -> Result<S> {
        let mut total = S::zero();
        for (dv, &a) in self.partition.devices.iter().zip(&self.partition.alpha) {
            total += a * self.model.loss(w, dv)?;
        }
        Ok(total)
    }

    pub fn test_loss(&self, w: &[S]) -> Result<S> {
        self.model.loss(w, &self.test)
    }

    pub fn dist_to_opt_sq(&self, w: &[S]) -> Option<S> {
        self.optimum.as_ref().map(|o| crate::linalg::dist_sq(w, o))
    }

    pub fn save_json<W: Write>(&self, out: W) -> Result<(), serde_json::Error> {
        serde_json::to_writer(out, self)
    }

    pub fn load_json<R: Read>(input: R) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let task: Self = serde_json::from_reader(input)?;
        if task.schema_version != TASK_SCHEMA_VERSION {
            return Err(format!(
                "unsupported task schema_version {} (expected {TASK_SCHEMA_VERSION})",
                task.schema_version
            )
            .into());
        }
        Ok(task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsTaskConfig {
    pub d: usize,
    pub devices: usize,
    pub n_per_device: usize,
    pub sigma: f64,
    pub r_bound: f64,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for LsTaskConfig {
    fn default() -> Self {
        LsTaskConfig {
            d: 10,
            devices: 100,
            n_per_device: 50,
            sigma: 0.1,
            r_bound: 1.0,
            n_test: 1000,
            seed: 0,
        }
    }
}

/// Draws `n` centered anisotropic Gaussian features, coordinate `i` scaled
/// by `1 / sqrt(i + 1)`, then rescaled so the largest norm equals `r_bound`.
fn bounded_features<S: Scalar>(n: usize, d: usize, r_bound: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    let mut x: Vec<f64> = (0..n * d)
        .map(|j| rng.sample::<f64, _>(StandardNormal) / ((j % d + 1) as f64).sqrt())
        .collect();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    for row in x.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let max_norm = x.chunks(d).map(norm).fold(0.0, f64::max);
    if max_norm > 0.0 {
        let s = r_bound / max_norm;
        x.iter_mut().for_each(|v| *v *= s);
    }
    x.into_iter().map(S::of).collect()
}

fn validate_sizes(d: usize, devices: usize, n_per_device: usize, n_test: usize) -> Result<()> {
    for (name, v) in [("d", d), ("devices", devices), ("n_per_device", n_per_device), ("n_test", n_test)] {
        if v == 0 {
            return Err(Error::invalid(name, "must be >= 1"));
        }
    }
    Ok(())
}

/// Well-specified least squares over `devices` i.i.d. shards plus a test set.
pub fn generate_ls_task<S: Scalar>(cfg: &LsTaskConfig) -> Result<FederatedTask<S>> {
    validate_sizes(cfg.d, cfg.devices, cfg.n_per_device, cfg.n_test)?;
    if !(cfg.sigma >= 0.0) || !cfg.sigma.is_finite() {
        return Err(Error::invalid("sigma", "must be finite and >= 0"));
    }
    if !(cfg.r_bound > 0.0) || !cfg.r_bound.is_finite() {
        return Err(Error::invalid("r_bound", "must be finite and > 0"));
    }
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w_star: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
        .collect();

    let n_train = cfg.devices * cfg.n_per_device;
    let x = bounded_features::<S>(n_train + cfg.n_test, d, cfg.r_bound, &mut rng);
    let w_s: Vec<S> = w_star.iter().map(|&v| S::of(v)).collect();
    let sigma = S::of(cfg.sigma);
    let y: Vec<S> = x
        .chunks(d)
        .map(|row| dot(&w_s, row) + sigma * S::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let devices = (0..cfg.devices)
        .map(|k| {
            let lo = k * cfg.n_per_device;
            let hi = lo + cfg.n_per_device;
            Dataset::new(d, x[lo * d..hi * d].to_vec(), y[lo..hi].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let partition = FederatedPartition::from_devices(devices)?;
    let test = Dataset::new(d, x[n_train * d..].to_vec(), y[n_train..].to_vec())?;

    let pooled = partition.pooled();
    let ev = symmetric_eigenvalues(&pooled.second_moment(), d);
    let (mu, l_smooth) = (ev[0], ev[d - 1]);
    let r_bound = S::of(cfg.r_bound);
    let optimum = exact_optimum(&pooled)?;
    Ok(FederatedTask {
        schema_version: TASK_SCHEMA_VERSION,
        model: Model::LeastSquares,
        partition,
        test,
        optimum: Some(optimum),
        ls: Some(SyntheticLsTask {
            d,
            w_star: w_s,
            r_bound,
            sigma,
            mu,
            l_smooth,
            kappa: r_bound * r_bound / mu,
        }),
    })
}

/// Least-squares minimizer of the pooled samples via the normal equations.
pub fn exact_optimum<S: Scalar>(data: &Dataset<S>) -> Result<Vec<S>> {
    if data.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let d = data.d;
    let a = data.second_moment();
    let mut b = vec![S::zero(); d];
    let n = S::of_usize(data.len());
    for i in 0..data.len() {
        for (bj, &xj) in b.iter_mut().zip(data.row(i)) {
            *bj += xj * data.y[i] / n;
        }
    }
    cholesky_solve(&a, &b, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticTaskConfig {
    pub d: usize,
    pub classes: usize,
    pub devices: usize,
    pub n_per_device: usize,
    /// Norm of each class mean; features are `mean_c + N(0, I)`.
    pub separation: f64,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for LogisticTaskConfig {
    fn default() -> Self {
        LogisticTaskConfig {
            d: 10,
            classes: 3,
            devices: 100,
            n_per_device: 50,
            separation: 2.0,
            n_test: 1000,
            seed: 0,
        }
    }
}

/// Gaussian class clusters with uniformly drawn labels.
pub fn generate_logistic_task<S: Scalar>(cfg: &LogisticTaskConfig) -> Result<FederatedTask<S>> {
    validate_sizes(cfg.d, cfg.devices, cfg.n_per_device, cfg.n_test)?;
    if cfg.classes < 2 {
        return Err(Error::invalid("classes", "must be >= 2"));
    }
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&v).max(f64::MIN_POSITIVE);
            v.iter().map(|x| x * cfg.separation / n).collect()
        })
        .collect();
    let mut draw = |n: usize| {
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..cfg.classes);
            for mu in &means[c] {
                x.push(S::of(mu + rng.sample::<f64, _>(StandardNormal)));
            }
            y.push(S::of_usize(c));
        }
        Dataset::new(d, x, y)
    };
    let devices = (0..cfg.devices)
        .map(|_| draw(cfg.n_per_device))
        .collect::<Result<Vec<_>>>()?;
    let test = draw(cfg.n_test)?;
    Ok(FederatedTask {
        schema_version: TASK_SCHEMA_VERSION,
        model: Model::Logistic { classes: cfg.classes },
        partition: FederatedPartition::from_devices(devices)?,
        test,
        optimum: None,
        ls: None,
    })
}
