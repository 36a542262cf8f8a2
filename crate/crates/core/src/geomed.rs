//! Weighted geometric median.
//!
//! The median of points `w_1..w_m` with weights `alpha_k > 0` minimizes
//! `g(z) = sum_k alpha_k |z - w_k|`. The solver works on the smoothed objective
//! `g_nu`, where each distance below `nu` is replaced by the quadratic
//! `|v|^2 / (2 nu) + nu / 2`, and minimizes it by alternating minimization of
//! the surrogate
//!
//! ```text
//! G(z, eta) = 1/2 sum_k alpha_k (|z - w_k|^2 / eta_k + eta_k),   eta_k >= nu
//! ```
//!
//! Both block updates have closed forms (`eta_k = max(nu, |z - w_k|)`, then a
//! weighted mean with weights `alpha_k / eta_k`), so each iteration is exactly
//! one call to a [`SecureAverageOracle`].
//!
//! [`brute_force_gm`] is an independent reference solver (vertex optimality
//! test, subgradient warm start, damped Newton) used to check the iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, dist, norm, pairwise_sum};
use crate::scalar::Scalar;
use crate::secure_avg::{Contribution, SecureAverageOracle};

/// Default smoothing parameter.
pub const DEFAULT_NU: f64 = 1e-6;
/// Default relative-improvement stopping tolerance.
pub const DEFAULT_REL_TOL: f64 = 1e-6;
/// Default iteration budget inside a federated round.
pub const FEDERATED_BUDGET: usize = 3;
/// Default iteration budget for standalone solves.
pub const STANDALONE_BUDGET: usize = 50;

/// Points with positive weights normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPointSet<S> {
    points: Vec<Vec<S>>,
    weights: Vec<S>,
}

impl<S: Scalar> WeightedPointSet<S> {
    pub fn new(points: Vec<Vec<S>>, weights: Vec<S>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point set"));
        }
        if weights.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::Empty("point coordinates"));
        }
        for p in &points {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("points", "coordinates must be finite"));
            }
        }
        for (index, &w) in weights.iter().enumerate() {
            if !(w > S::zero()) || !w.is_finite() {
                return Err(Error::NonPositiveWeight {
                    index,
                    value: w.as_f64(),
                });
            }
        }
        let total: S = pairwise_sum(&weights);
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(WeightedPointSet { points, weights })
    }

    /// Equal weights `1/m`.
    pub fn uniform(points: Vec<Vec<S>>) -> Result<Self> {
        let m = points.len();
        Self::new(points, vec![S::one(); m])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<S>] {
        &self.points
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    /// Weighted arithmetic mean, computed locally (no oracle).
    pub fn weighted_mean(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim()];
        for (p, &a) in self.points.iter().zip(&self.weights) {
            for (o, &x) in out.iter_mut().zip(p) {
                *o += a * x;
            }
        }
        out
    }

    /// Diameter of the convex hull (largest pairwise distance).
    pub fn diameter(&self) -> S {
        let mut best = S::zero();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.max(dist(&self.points[i], &self.points[j]));
            }
        }
        best
    }

    fn check_dim(&self, z: &[S]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }
}

/// Smoothing parameter `nu >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Smoothing<S>(S);

impl<S: Scalar> Smoothing<S> {
    pub fn new(nu: S) -> Result<Self> {
        if !(nu >= S::zero()) || !nu.is_finite() {
            return Err(Error::invalid("nu", format!("must be finite and >= 0, got {nu}")));
        }
        Ok(Smoothing(nu))
    }

    pub fn value(self) -> S {
        self.0
    }

    fn require_positive(self) -> Result<S> {
        if self.0 > S::zero() {
            Ok(self.0)
        } else {
            Err(Error::invalid("nu", "the solver needs nu > 0"))
        }
    }
}

impl<S: Scalar> Default for Smoothing<S> {
    fn default() -> Self {
        Smoothing(S::of(DEFAULT_NU))
    }
}

/// Per-point auxiliary variables of the surrogate, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaVector<S>(Vec<S>);

impl<S: Scalar> EtaVector<S> {
    pub fn new(eta: Vec<S>) -> Result<Self> {
        for (index, &e) in eta.iter().enumerate() {
            if !(e > S::zero()) || !e.is_finite() {
                return Err(Error::NonPositiveWeight {
                    index,
                    value: e.as_f64(),
                });
            }
        }
        Ok(EtaVector(eta))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn min(&self) -> S {
        self.0.iter().fold(S::infinity(), |a, &b| a.min(b))
    }
}

/// `sum_k alpha_k |z - w_k|`
pub fn gm_objective<S: Scalar>(z: &[S], set: &WeightedPointSet<S>) -> Result<S> {
    set.check_dim(z)?;
    let terms: Vec<S> = set
        .points
        .iter()
        .zip(&set.weights)
        .map(|(w, &a)| a * dist(z, w))
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Smoothed norm as a function of the plain norm `r`. `nu = 0` gives `r`.
#[inline]
pub fn smoothed_norm_of<S: Scalar>(r: S, nu: S) -> S {
    if r > nu {
        r
    } else if nu > S::zero() {
        r * r / (S::two() * nu) + nu * S::half()
    } else {
        r
    }
}

pub fn smoothed_norm<S: Scalar>(v: &[S], nu: Smoothing<S>) -> S {
    smoothed_norm_of(norm(v), nu.value())
}

/// `g_nu(z) = sum_k alpha_k |z - w_k|_(nu)`
pub fn smoothed_objective<S: Scalar>(z: &[S], set: &WeightedPointSet<S>, nu: Smoothing<S>) -> Result<S> {
    set.check_dim(z)?;
    let terms: Vec<S> = set
        .points
        .iter()
        .zip(&set.weights)
        .map(|(w, &a)| a * smoothed_norm_of(dist(z, w), nu.value()))
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Gradient of `g_nu`: `sum_k alpha_k (z - w_k) / max(nu, |z - w_k|)`.
pub fn smoothed_gradient<S: Scalar>(z: &[S], set: &WeightedPointSet<S>, nu: Smoothing<S>) -> Result<Vec<S>> {
    set.check_dim(z)?;
    let nu = nu.require_positive()?;
    let mut grad = vec![S::zero(); set.dim()];
    for (w, &a) in set.points.iter().zip(&set.weights) {
        let c = a / nu.max(dist(z, w));
        for ((gi, &zi), &wi) in grad.iter_mut().zip(z).zip(w) {
            *gi += c * (zi - wi);
        }
    }
    Ok(grad)
}

/// `G(z, eta) = 1/2 sum_k alpha_k (|z - w_k|^2 / eta_k + eta_k)`
pub fn surrogate<S: Scalar>(z: &[S], eta: &EtaVector<S>, set: &WeightedPointSet<S>) -> Result<S> {
    set.check_dim(z)?;
    if eta.0.len() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            got: eta.0.len(),
        });
    }
    let terms: Vec<S> = set
        .points
        .iter()
        .zip(&set.weights)
        .zip(&eta.0)
        .map(|((w, &a), &e)| {
            let r = dist(z, w);
            S::half() * a * (r * r / e + e)
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Minimizer of `G(z, .)` over `eta >= nu`: `eta_k = max(nu, |z - w_k|)`.
pub fn eta_update<S: Scalar>(z: &[S], set: &WeightedPointSet<S>, nu: Smoothing<S>) -> Result<EtaVector<S>> {
    set.check_dim(z)?;
    let nu = nu.require_positive()?;
    Ok(EtaVector(set.points.iter().map(|w| nu.max(dist(z, w))).collect()))
}

/// `L = sum_k alpha_k / eta_k`, the curvature of the surrogate in `z`.
pub fn lipschitz<S: Scalar>(eta: &EtaVector<S>, set: &WeightedPointSet<S>) -> Result<S> {
    if eta.0.len() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            got: eta.0.len(),
        });
    }
    let terms: Vec<S> = set.weights.iter().zip(&eta.0).map(|(&a, &e)| a / e).collect();
    Ok(pairwise_sum(&terms))
}

/// Reweighting `beta_k = alpha_k / eta_k` followed by one oracle average.
fn reweighted_average<S: Scalar>(
    set: &WeightedPointSet<S>,
    eta: &EtaVector<S>,
    oracle: &SecureAverageOracle,
) -> Result<(Vec<S>, Vec<S>)> {
    let beta: Vec<S> = set.weights.iter().zip(&eta.0).map(|(&a, &e)| a / e).collect();
    let contribs: Vec<Contribution<'_, S>> = set
        .points
        .iter()
        .zip(&beta)
        .map(|(w, &b)| Contribution::new(w, b))
        .collect();
    let z = oracle.secure_average(&contribs)?;
    Ok((z, beta))
}

/// One smoothed Weiszfeld iteration (exactly one oracle call).
pub fn weiszfeld_step<S: Scalar>(
    z: &[S],
    set: &WeightedPointSet<S>,
    nu: Smoothing<S>,
    oracle: &SecureAverageOracle,
) -> Result<Vec<S>> {
    let eta = eta_update(z, set, nu)?;
    Ok(reweighted_average(set, &eta, oracle)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeiszfeldConfig<S> {
    pub nu: Smoothing<S>,
    pub budget: usize,
    pub rel_tol: S,
}

impl<S: Scalar> WeiszfeldConfig<S> {
    pub fn standalone() -> Self {
        WeiszfeldConfig {
            nu: Smoothing::default(),
            budget: STANDALONE_BUDGET,
            rel_tol: S::of(DEFAULT_REL_TOL),
        }
    }

    pub fn federated() -> Self {
        WeiszfeldConfig {
            budget: FEDERATED_BUDGET,
            ..Self::standalone()
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_nu(mut self, nu: S) -> Result<Self> {
        self.nu = Smoothing::new(nu)?;
        Ok(self)
    }

    pub fn with_rel_tol(mut self, rel_tol: S) -> Self {
        self.rel_tol = rel_tol;
        self
    }
}

impl<S: Scalar> Default for WeiszfeldConfig<S> {
    fn default() -> Self {
        Self::standalone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    RelativeImprovement,
}

/// State at iterate `t`. `eta_min` and `z` are kept for invariant checks but
/// are not part of the serialized trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry<S> {
    pub t: usize,
    #[serde(skip)]
    pub z: Vec<S>,
    pub g: S,
    pub g_nu: S,
    #[serde(rename = "L")]
    pub lipschitz: S,
    #[serde(skip)]
    pub eta_min: S,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmResult<S> {
    pub z: Vec<S>,
    pub g_value: S,
    pub g_nu_value: S,
    pub iterations: usize,
    pub beta: Vec<S>,
    pub converged_by: StopReason,
    pub oracle_calls: u64,
    pub nu: S,
    /// Upper bound on `g(z) - min g` implied by the sublinear rate, using
    /// `max_k |z0 - w_k|` in place of the unknown `|z0 - z*|`.
    pub epsilon_bound: S,
    pub trace: Vec<TraceEntry<S>>,
}

impl<S: Scalar> GmResult<S> {
    /// Smallest `eta` seen over iterates `0..t` (at least `nu`).
    pub fn effective_nu(&self, t: usize) -> S {
        self.trace[..t.min(self.trace.len())]
            .iter()
            .fold(S::infinity(), |acc, e| acc.min(e.eta_min))
    }

    /// Right-hand side of the sublinear rate at prefix `t >= 1`:
    /// `2 |z0 - z*|^2 / (nu_hat t) + slack`.
    pub fn rate_bound(&self, t: usize, init_dist_sq: S, slack: S) -> S {
        S::two() * init_dist_sq / (self.effective_nu(t) * S::of_usize(t)) + slack
    }
}

/// Smoothed Weiszfeld iteration.
///
/// Starts from `z0`, or from the weighted mean (one extra oracle call) when
/// `z0` is `None`. Stops after `budget` iterations or once the relative change
/// of `g_nu` between consecutive iterates drops to `rel_tol`.
pub fn smoothed_weiszfeld<S: Scalar>(
    set: &WeightedPointSet<S>,
    config: &WeiszfeldConfig<S>,
    z0: Option<&[S]>,
    oracle: &SecureAverageOracle,
) -> Result<GmResult<S>> {
    let nu = config.nu.require_positive()?;
    if config.budget == 0 {
        return Err(Error::ZeroBudget);
    }
    if !(config.rel_tol >= S::zero()) {
        return Err(Error::invalid("rel_tol", "must be >= 0"));
    }
    let smoothing = config.nu;
    let mut calls = 0u64;

    let mut z = match z0 {
        Some(z0) => {
            set.check_dim(z0)?;
            z0.to_vec()
        }
        None => {
            let contribs: Vec<_> = set
                .points
                .iter()
                .zip(&set.weights)
                .map(|(w, &a)| Contribution::new(w, a))
                .collect();
            calls += 1;
            oracle.secure_average(&contribs)?
        }
    };
    let r0 = set
        .points
        .iter()
        .fold(S::zero(), |acc, w| acc.max(dist(&z, w)));

    if set.len() == 1 {
        let z = set.points[0].clone();
        let eta = eta_update(&z, set, smoothing)?;
        let l = lipschitz(&eta, set)?;
        let g_nu = smoothed_objective(&z, set, smoothing)?;
        let beta = set.weights.iter().zip(&eta.0).map(|(&a, &e)| a / e).collect();
        return Ok(GmResult {
            g_value: S::zero(),
            g_nu_value: g_nu,
            iterations: 0,
            beta,
            converged_by: StopReason::RelativeImprovement,
            oracle_calls: calls,
            nu,
            epsilon_bound: S::zero(),
            trace: vec![TraceEntry {
                t: 0,
                z: z.clone(),
                g: S::zero(),
                g_nu,
                lipschitz: l,
                eta_min: eta.min(),
            }],
            z,
        });
    }

    let mut trace = Vec::with_capacity(config.budget + 1);
    let mut g_nu = smoothed_objective(&z, set, smoothing)?;
    let mut beta = Vec::new();
    let mut inv_l_sum = S::zero();
    let mut converged_by = StopReason::Budget;
    let mut iterations = 0;

    while iterations < config.budget {
        let eta = eta_update(&z, set, smoothing)?;
        let l = lipschitz(&eta, set)?;
        inv_l_sum += S::one() / l;
        trace.push(TraceEntry {
            t: iterations,
            z: z.clone(),
            g: gm_objective(&z, set)?,
            g_nu,
            lipschitz: l,
            eta_min: eta.min(),
        });

        let (next, b) = reweighted_average(set, &eta, oracle)?;
        calls += 1;
        iterations += 1;
        beta = b;
        let g_nu_next = smoothed_objective(&next, set, smoothing)?;
        let improvement = (g_nu - g_nu_next).abs() / g_nu_next;
        z = next;
        g_nu = g_nu_next;
        if improvement <= config.rel_tol {
            converged_by = StopReason::RelativeImprovement;
            break;
        }
    }

    let eta = eta_update(&z, set, smoothing)?;
    let g = gm_objective(&z, set)?;
    trace.push(TraceEntry {
        t: iterations,
        z: z.clone(),
        g,
        g_nu,
        lipschitz: lipschitz(&eta, set)?,
        eta_min: eta.min(),
    });

    Ok(GmResult {
        z,
        g_value: g,
        g_nu_value: g_nu,
        iterations,
        beta,
        converged_by,
        oracle_calls: calls,
        nu,
        epsilon_bound: S::two() * r0 * r0 / inv_l_sum + nu * S::half(),
        trace,
    })
}

/// Index of a data point that minimizes `g`, if any.
///
/// `w_k` is optimal iff `|sum_{j: w_j != w_k} alpha_j (w_k - w_j)/|w_k - w_j||`
/// is at most the total weight sitting at `w_k` (duplicates included).
pub fn vertex_minimizer<S: Scalar>(set: &WeightedPointSet<S>) -> Option<usize> {
    let d = set.dim();
    (0..set.len()).find(|&k| {
        let wk = &set.points[k];
        let mut mass = S::zero();
        let mut pull = vec![S::zero(); d];
        for (w, &a) in set.points.iter().zip(&set.weights) {
            let r = dist(wk, w);
            if r == S::zero() {
                mass += a;
            } else {
                for ((p, &x), &y) in pull.iter_mut().zip(wk).zip(w) {
                    *p += a * (x - y) / r;
                }
            }
        }
        norm(&pull) <= mass
    })
}

/// Reference geometric median, independent of the Weiszfeld iteration.
///
/// Checks every data point for optimality first. Otherwise the minimizer is
/// off the data, `g` is smooth and strictly convex near it, and the result is
/// refined by a projected subgradient warm start followed by damped Newton.
/// Returns once the last objective change is below `tol / 10` and either
/// `|grad g(z)| * max_k |z - w_k| <= tol` (a certificate for
/// `g(z) - min g <= tol`) or the Newton decrement estimate of the gap is.
pub fn brute_force_gm<S: Scalar>(set: &WeightedPointSet<S>, tol: S) -> Result<Vec<S>> {
    if !(tol > S::zero()) {
        return Err(Error::invalid("tol", "must be > 0"));
    }
    if set.len() == 1 {
        return Ok(set.points[0].clone());
    }
    if let Some(k) = vertex_minimizer(set) {
        return Ok(set.points[k].clone());
    }
    let d = set.dim();
    let g = |z: &[S]| gm_objective(z, set).expect("dimension checked");

    let mut lo = set.points[0].clone();
    let mut hi = set.points[0].clone();
    for p in &set.points {
        for i in 0..d {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let span = dist(&lo, &hi).max(S::min_positive_value());

    // projected normalized subgradient with diminishing steps
    let mut z = set.weighted_mean();
    let mut best = z.clone();
    let mut g_best = g(&z);
    for k in 0..2000 {
        let (grad, _) = gradient_and_hessian(&z, set, false);
        let gn = norm(&grad);
        if gn == S::zero() {
            break;
        }
        let step = span / (S::of(10.0) * S::of_usize(k + 1).sqrt());
        for i in 0..d {
            z[i] = (z[i] - step * grad[i] / gn).max(lo[i]).min(hi[i]);
        }
        let gz = g(&z);
        if gz < g_best {
            g_best = gz;
            best.clone_from(&z);
        }
    }

    // damped Newton
    let mut z = best;
    let mut gz = g_best;
    const NEWTON_CAP: usize = 500;
    for _ in 0..NEWTON_CAP {
        let (grad, hess) = gradient_and_hessian(&z, set, true);
        let radius = set.points.iter().fold(S::zero(), |acc, w| acc.max(dist(&z, w)));
        let certificate = norm(&grad) * radius;

        let mut ridge = S::zero();
        let direction = loop {
            let mut h = hess.clone();
            let scale = (0..d).fold(S::zero(), |acc, i| acc.max(h[i * d + i]));
            for i in 0..d {
                h[i * d + i] += ridge * scale.max(S::one());
            }
            let rhs: Vec<S> = grad.iter().map(|&x| -x).collect();
            match cholesky_solve(&h, &rhs, d) {
                Ok(p) => break p,
                Err(_) if ridge < S::of(1e6) => {
                    ridge = if ridge == S::zero() { S::of(1e-12) } else { ridge * S::of(100.0) };
                }
                Err(e) => return Err(e),
            }
        };

        let slope: S = grad.iter().zip(&direction).map(|(&a, &b)| a * b).sum();
        let mut t = S::one();
        let mut candidate: Vec<S>;
        let mut g_cand;
        loop {
            candidate = z.iter().zip(&direction).map(|(&a, &b)| a + t * b).collect();
            g_cand = g(&candidate);
            if g_cand <= gz + S::of(1e-4) * t * slope || t < S::of(1e-30) {
                break;
            }
            t *= S::half();
        }
        let change = (gz - g_cand).abs();
        // Near the optimum the decrease drops below the rounding level of g;
        // keep taking Newton steps there so the gradient keeps shrinking.
        let roundoff = S::of(4.0) * S::epsilon() * gz.abs();
        if g_cand <= gz + roundoff {
            z = candidate;
            gz = g_cand;
        }
        // Newton decrement: half of grad^T H^-1 grad estimates the remaining gap
        // once the local quadratic model is accurate.
        let decrement = -slope * S::half();
        if (certificate <= tol || decrement <= tol) && change < tol / S::of(10.0) {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence {
        method: "brute_force_gm",
        iterations: NEWTON_CAP,
    })
}

/// Gradient of `g` and (optionally) its Hessian
/// `sum_k alpha_k (I - u_k u_k^T) / r_k` at a point off the data.
fn gradient_and_hessian<S: Scalar>(z: &[S], set: &WeightedPointSet<S>, want_hessian: bool) -> (Vec<S>, Vec<S>) {
    let d = set.dim();
    let mut grad = vec![S::zero(); d];
    let mut hess = if want_hessian { vec![S::zero(); d * d] } else { Vec::new() };
    let mut u = vec![S::zero(); d];
    for (w, &a) in set.points.iter().zip(&set.weights) {
        let r = dist(z, w);
        if r == S::zero() {
            continue;
        }
        for i in 0..d {
            u[i] = (z[i] - w[i]) / r;
            grad[i] += a * u[i];
        }
        if want_hessian {
            let c = a / r;
            for i in 0..d {
                hess[i * d + i] += c;
                for j in 0..d {
                    hess[i * d + j] -= c * u[i] * u[j];
                }
            }
        }
    }
    (grad, hess)
}

/// Right-hand side of the function-value robustness bound
/// `L / (1 - 2 theta)^2 * (4 D^2 + eps^2)` for an `eps`-approximate median
/// when a weight fraction `theta < 1/2` is arbitrary and every other point
/// lies within `D` of the reference.
pub fn robustness_bound<S: Scalar>(theta: S, eps: S, l_smooth: S, max_honest_dist: S) -> Result<S> {
    check_bound_inputs(theta, eps, max_honest_dist)?;
    if !(l_smooth >= S::zero()) {
        return Err(Error::invalid("l_smooth", "must be >= 0"));
    }
    let gap = S::one() - S::two() * theta;
    Ok(l_smooth / (gap * gap) * (S::of(4.0) * max_honest_dist * max_honest_dist + eps * eps))
}

/// Displacement bound `2 (1 - theta)/(1 - 2 theta) D + eps / (1 - 2 theta)`.
pub fn displacement_bound<S: Scalar>(theta: S, eps: S, max_honest_dist: S) -> Result<S> {
    check_bound_inputs(theta, eps, max_honest_dist)?;
    let gap = S::one() - S::two() * theta;
    Ok(S::two() * (S::one() - theta) / gap * max_honest_dist + eps / gap)
}

fn check_bound_inputs<S: Scalar>(theta: S, eps: S, max_honest_dist: S) -> Result<()> {
    if !(theta >= S::zero() && theta < S::half()) {
        return Err(Error::invalid("theta", format!("must lie in [0, 1/2), got {theta}")));
    }
    if !(eps >= S::zero()) {
        return Err(Error::invalid("eps", "must be >= 0"));
    }
    if !(max_honest_dist >= S::zero()) {
        return Err(Error::invalid("max_honest_dist", "must be >= 0"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nu(x: f64) -> Smoothing<f64> {
        Smoothing::new(x).unwrap()
    }

    fn triangle() -> WeightedPointSet<f64> {
        let h = 3f64.sqrt() / 2.0;
        WeightedPointSet::uniform(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]]).unwrap()
    }

    #[test]
    fn construction_normalizes_and_validates() {
        let set = WeightedPointSet::new(vec![vec![0.0], vec![1.0]], vec![3.0, 1.0]).unwrap();
        assert_eq!(set.weights(), &[0.75, 0.25]);
        assert!(WeightedPointSet::<f64>::new(vec![], vec![]).is_err());
        assert!(WeightedPointSet::new(vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
        assert!(WeightedPointSet::new(vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(WeightedPointSet::new(vec![vec![0.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn objective_trivial_values() {
        let single = WeightedPointSet::uniform(vec![vec![2.0, -1.0]]).unwrap();
        assert_eq!(gm_objective(&[2.0, -1.0], &single).unwrap(), 0.0);
        let pair = WeightedPointSet::uniform(vec![vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(gm_objective(&[0.0], &pair).unwrap(), 1.0);
        assert!(matches!(
            gm_objective(&[0.0, 0.0], &pair),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn smoothed_norm_branches() {
        assert_eq!(smoothed_norm(&[0.0, 0.0], nu(0.5)), 0.25);
        assert_eq!(smoothed_norm(&[2.0, 0.0], nu(1.0)), 2.0);
        // seam: |v| = nu = 0.8
        let inner = 0.8f64 * 0.8 / (2.0 * 0.8) + 0.4;
        assert!((inner - 0.8).abs() < 1e-15);
        assert_eq!(smoothed_norm(&[0.8], nu(0.8)), 0.8);
        assert_eq!(smoothed_norm(&[0.0, 0.6], nu(0.0)), 0.6);
    }

    #[test]
    fn smoothed_objective_single_point_at_origin() {
        let set = WeightedPointSet::uniform(vec![vec![1.0, 1.0]]).unwrap();
        assert_eq!(smoothed_objective(&[1.0, 1.0], &set, nu(0.5)).unwrap(), 0.25);
    }

    #[test]
    fn smoothed_objective_equals_plain_far_away() {
        let set = triangle();
        let z = [5.0, 5.0];
        assert_eq!(
            smoothed_objective(&z, &set, nu(0.1)).unwrap(),
            gm_objective(&z, &set).unwrap()
        );
    }

    #[test]
    fn surrogate_trivial_values() {
        let set = triangle();
        let z = [3.0, -2.0];
        let eta = EtaVector::new(set.points().iter().map(|w| dist(&z, w)).collect()).unwrap();
        let g = gm_objective(&z, &set).unwrap();
        assert!((surrogate(&z, &eta, &set).unwrap() - g).abs() < 1e-14);

        let single = WeightedPointSet::<f64>::uniform(vec![vec![1.0, 2.0]]).unwrap();
        let eta = EtaVector::new(vec![0.3]).unwrap();
        assert!((surrogate(&[1.0, 2.0], &eta, &single).unwrap() - 0.15).abs() < 1e-15);
        assert!(EtaVector::new(vec![0.0]).is_err());
    }

    #[test]
    fn eta_update_clamps_and_passes_through() {
        let set = WeightedPointSet::uniform(vec![vec![0.0, 0.0], vec![0.3, 0.0]]).unwrap();
        let eta = eta_update(&[0.0, 0.0], &set, nu(0.1)).unwrap();
        assert_eq!(eta.as_slice()[0], 0.1);
        assert!((eta.as_slice()[1] - 0.3).abs() < 1e-15);
        assert!(eta_update(&[0.0, 0.0], &set, nu(0.0)).is_err());
    }

    #[test]
    fn lipschitz_constant_eta() {
        let set = triangle();
        let eta = EtaVector::new(vec![0.25; 3]).unwrap();
        assert!((lipschitz(&eta, &set).unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn weiszfeld_step_trivial_cases() {
        let oracle = SecureAverageOracle::plain();
        let set = triangle();
        let c = set.weighted_mean();
        let next = weiszfeld_step(&c, &set, nu(1e-6), &oracle).unwrap();
        assert!(dist(&next, &c) < 1e-15);
        assert_eq!(oracle.call_count(), 1);

        let single = WeightedPointSet::uniform(vec![vec![4.0, 4.0]]).unwrap();
        assert_eq!(weiszfeld_step(&[-1.0, 9.0], &single, nu(1e-6), &oracle).unwrap(), vec![4.0, 4.0]);

        // 1D {0, 1} with weights (0.7, 0.3) from z = 0.5
        let line = WeightedPointSet::new(vec![vec![0.0], vec![1.0]], vec![0.7, 0.3]).unwrap();
        let next = weiszfeld_step(&[0.5], &line, nu(1e-6), &oracle).unwrap();
        assert!((next[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn solver_triangle_stops_at_centroid() {
        let oracle = SecureAverageOracle::plain();
        let set = triangle();
        let res = smoothed_weiszfeld(&set, &WeiszfeldConfig::standalone(), None, &oracle).unwrap();
        assert_eq!(res.converged_by, StopReason::RelativeImprovement);
        assert!(res.iterations <= 1);
        assert!(dist(&res.z, &set.weighted_mean()) < 1e-12);
        assert_eq!(res.oracle_calls, 1 + res.iterations as u64);
        assert_eq!(oracle.call_count(), res.oracle_calls);
    }

    #[test]
    fn solver_weighted_median_on_line() {
        let oracle = SecureAverageOracle::plain();
        let line = WeightedPointSet::<f64>::new(vec![vec![0.0], vec![1.0]], vec![0.7, 0.3]).unwrap();
        let cfg = WeiszfeldConfig::standalone();
        let res = smoothed_weiszfeld(&line, &cfg, None, &oracle).unwrap();
        assert!(res.z[0].abs() < 1e-5, "z = {:?}", res.z);
        assert!((res.g_value - 0.3).abs() <= 1e-6 / 2.0 + 1e-5);
        assert!(res.g_nu_value >= res.g_value);
        assert!(res.g_nu_value - res.g_value <= 0.5e-6 + 1e-15);
    }

    #[test]
    fn solver_single_point_and_errors() {
        let oracle = SecureAverageOracle::plain();
        let single = WeightedPointSet::uniform(vec![vec![1.0, -3.0]]).unwrap();
        let res = smoothed_weiszfeld(&single, &WeiszfeldConfig::standalone(), None, &oracle).unwrap();
        assert_eq!(res.z, vec![1.0, -3.0]);
        assert_eq!(res.iterations, 0);
        let beta_mean: f64 = res.beta[0] * res.z[0] / res.beta[0];
        assert_eq!(beta_mean, 1.0);

        let cfg = WeiszfeldConfig::standalone().with_budget(0);
        assert!(matches!(smoothed_weiszfeld(&single, &cfg, None, &oracle), Err(Error::ZeroBudget)));
        let cfg = WeiszfeldConfig::<f64>::standalone().with_nu(0.0).unwrap();
        assert!(smoothed_weiszfeld(&single, &cfg, None, &oracle).is_err());
    }

    #[test]
    fn result_serializes_trace_fields_only() {
        let oracle = SecureAverageOracle::plain();
        let res = smoothed_weiszfeld(&triangle(), &WeiszfeldConfig::standalone(), None, &oracle).unwrap();
        let v = serde_json::to_value(&res).unwrap();
        let entry = v["trace"][0].as_object().unwrap();
        let mut keys: Vec<_> = entry.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, vec!["L", "g", "g_nu", "t"]);
        assert_eq!(v["converged_by"], "relative_improvement");
    }

    #[test]
    fn brute_force_trivial_cases() {
        let tol = 1e-10;
        let set = triangle();
        let z = brute_force_gm(&set, tol).unwrap();
        assert!(dist(&z, &set.weighted_mean()) < 1e-6);

        let line = WeightedPointSet::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.6, 0.2, 0.2]).unwrap();
        assert_eq!(brute_force_gm(&line, tol).unwrap(), vec![0.0]);
        assert_eq!(vertex_minimizer(&line), Some(0));
    }

    #[test]
    fn duplicates_add_weight() {
        // two copies of the origin at 0.3 each outweigh the rest
        let set = WeightedPointSet::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.3, 0.3, 0.2, 0.2],
        )
        .unwrap();
        assert_eq!(brute_force_gm(&set, 1e-10).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bound_trivial_values() {
        assert_eq!(displacement_bound(0.0, 0.0, 3.0).unwrap(), 6.0);
        let mut prev = 0.0;
        for theta in [0.0, 0.1, 0.3, 0.45, 0.49, 0.499] {
            let b = robustness_bound(theta, 0.1, 1.0, 1.0).unwrap();
            assert!(b > prev);
            prev = b;
        }
        assert_eq!(robustness_bound(0.0, 0.0, 2.0, 1.0).unwrap(), 8.0);
        assert!(robustness_bound(0.5, 0.0, 1.0, 1.0).is_err());
        assert!(displacement_bound(0.7, 0.0, 1.0).is_err());
    }
}
