//! Balancing weights.
//!
//! Stable balancing weights (minimum-variance weights under an L∞ imbalance
//! tolerance) are solved through their Lagrangian dual
//!
//! ```text
//! min_β  (1/N) Σ_{i∈G} ½ [β·φ(X_i)]₊²  −  β·m  +  λ Σ_{j≥1} |β_j|
//! ```
//!
//! where `G` is the reweighted group, `m` the target mean of the features
//! and `N` the normalizer (n when targeting the full sample, n1 when
//! targeting the treated). The gradient of the smooth part is exactly the
//! primal imbalance `(1/N) Σ γ_i φ_i − m`, and the weights are recovered as
//! `γ_i = [β̂·φ(X_i)]₊`. The intercept feature is unpenalised, which pins
//! `Σ γ = N`.
//!
//! Entropy balancing is provided as the exact-balance alternative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{BalanceTarget, Dataset, Estimand, Group, MeanKind};
use crate::error::{Error, Result};
use crate::linalg::{dot, spd_solve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMethod {
    #[default]
    Sbw,
    Entropy,
}

/// Algorithm for the SBW dual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DualAlgorithm {
    #[default]
    ProximalNewton,
    ProximalGradient,
}

/// Feature map φ. Always starts with the intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// `(1, x_1, …, x_d)`
    #[default]
    Linear,
    /// `(1, x_1, …, x_d, x_1², …, x_d²)`
    Quadratic,
}

impl Transform {
    pub fn dim(self, d: usize) -> usize {
        match self {
            Transform::Linear => d + 1,
            Transform::Quadratic => 2 * d + 1,
        }
    }

    pub fn apply_into(self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        out.extend_from_slice(x);
        if self == Transform::Quadratic {
            out.extend(x.iter().map(|v| v * v));
        }
    }

    pub fn feature_names(self, names: &[String]) -> Vec<String> {
        let mut out = vec!["(intercept)".to_string()];
        out.extend(names.iter().cloned());
        if self == Transform::Quadratic {
            out.extend(names.iter().map(|n| format!("{n}^2")));
        }
        out
    }
}

/// Balancing problem configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceSpec {
    pub method: BalanceMethod,
    pub transform: Transform,
    /// Imbalance tolerance λ per non-intercept feature (standardized units).
    pub tol: f64,
    pub algorithm: DualAlgorithm,
    pub max_iter: usize,
    /// Stationarity tolerance on the minimum-norm subgradient (∞-norm).
    pub grad_tol: f64,
    /// ‖β‖∞ above which a near-infeasibility warning is attached.
    pub beta_cap: f64,
}

impl Default for BalanceSpec {
    fn default() -> Self {
        BalanceSpec {
            method: BalanceMethod::Sbw,
            transform: Transform::Linear,
            tol: 0.05,
            algorithm: DualAlgorithm::ProximalNewton,
            max_iter: 50_000,
            grad_tol: 1e-8,
            beta_cap: 1e4,
        }
    }
}

impl BalanceSpec {
    pub fn sbw(tol: f64) -> Self {
        BalanceSpec { tol, ..Default::default() }
    }

    pub fn entropy() -> Self {
        BalanceSpec { method: BalanceMethod::Entropy, tol: 0.0, ..Default::default() }
    }

    fn check(&self) -> Result<()> {
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(Error::Domain(format!("balance tolerance must be ≥ 0, got {}", self.tol)));
        }
        if self.max_iter == 0 || !(self.grad_tol > 0.0) {
            return Err(Error::Config("max_iter and grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Fitted weights for one weighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub kind: MeanKind,
    pub method: BalanceMethod,
    pub transform: Transform,
    /// Dataset row of each weight, in increasing order.
    pub rows: Vec<usize>,
    #[serde(rename = "weights")]
    pub gamma: Vec<f64>,
    /// Dual coefficients, one per feature (intercept first).
    pub beta: Vec<f64>,
    pub feature_names: Vec<String>,
    /// `(1/N) Σ γ_i φ_i − m` per feature.
    pub imbalance: Vec<f64>,
    /// Dual objective at the solution.
    pub objective: f64,
    pub iterations: usize,
    /// Final stationarity residual.
    pub residual: f64,
    pub warnings: Vec<String>,
}

impl WeightFit {
    /// Evaluates the fitted weight function at a feature vector φ(x).
    pub fn weight_at(&self, phi: &[f64]) -> f64 {
        let s = dot(&self.beta, phi);
        match self.method {
            BalanceMethod::Sbw => s.max(0.0),
            BalanceMethod::Entropy => s.exp(),
        }
    }

    pub fn max_abs_imbalance(&self) -> f64 {
        self.imbalance.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Outcomes of the reweighted group, aligned with `gamma`.
    pub fn group_outcomes(&self, data: &Dataset) -> Vec<f64> {
        self.rows.iter().map(|&i| data.y()[i]).collect()
    }

    /// Sum-normalized (Hájek) weighted mean of the group's outcomes.
    pub fn hajek_estimate(&self, data: &Dataset) -> Result<f64> {
        hajek(&self.group_outcomes(data), &self.gamma)
    }

    /// `(1/N) Σ γ_i Y_i`.
    pub fn raw_estimate(&self, data: &Dataset) -> f64 {
        let n = self.kind.normalizer(data) as f64;
        dot(&self.group_outcomes(data), &self.gamma) / n
    }
}

/// `Σ w_i v_i / Σ w_i`.
pub fn hajek(values: &[f64], weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::ZeroWeightSum);
    }
    Ok(dot(values, weights) / total)
}

/// Feature rows of one group plus the target mean.
pub(crate) struct BalanceProblem {
    pub rows: Vec<usize>,
    /// Row-major `rows.len() × p`.
    pub phi: Vec<f64>,
    pub p: usize,
    pub target: Vec<f64>,
    pub normalizer: f64,
    pub feature_names: Vec<String>,
}

impl BalanceProblem {
    pub fn new(data: &Dataset, kind: MeanKind, transform: Transform) -> Self {
        let d = data.d();
        let p = transform.dim(d);
        let rows = data.rows_in(kind.group());
        let mut phi = Vec::with_capacity(rows.len() * p);
        let mut target = vec![0.0; p];
        let mut xrow = vec![0.0; d];
        let mut frow = Vec::with_capacity(p);
        let mut target_count = 0usize;
        let x = data.x();
        for i in 0..data.n() {
            for (j, slot) in xrow.iter_mut().enumerate() {
                *slot = x[(i, j)];
            }
            transform.apply_into(&xrow, &mut frow);
            let in_target = match kind.target() {
                BalanceTarget::FullSample => true,
                BalanceTarget::Treated => data.z()[i],
            };
            if in_target {
                target_count += 1;
                for (t, f) in target.iter_mut().zip(&frow) {
                    *t += f;
                }
            }
            let in_group = data.z()[i] == (kind.group() == Group::Treated);
            if in_group {
                phi.extend_from_slice(&frow);
            }
        }
        for t in &mut target {
            *t /= target_count as f64;
        }
        BalanceProblem {
            rows,
            phi,
            p,
            target,
            normalizer: kind.normalizer(data) as f64,
            feature_names: transform.feature_names(data.names()),
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.p..(i + 1) * self.p]
    }

    fn imbalance(&self, gamma: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for (i, g) in gamma.iter().enumerate() {
            if *g != 0.0 {
                for (o, f) in out.iter_mut().zip(self.row(i)) {
                    *o += g * f;
                }
            }
        }
        for (o, t) in out.iter_mut().zip(&self.target) {
            *o = *o / self.normalizer - t;
        }
        out
    }
}

/// Fits weights for one weighted mean.
pub fn fit_weights(data: &Dataset, spec: &BalanceSpec, kind: MeanKind) -> Result<WeightFit> {
    spec.check()?;
    let problem = BalanceProblem::new(data, kind, spec.transform);
    match spec.method {
        BalanceMethod::Sbw => solve_sbw_dual(&problem, spec, kind),
        BalanceMethod::Entropy => solve_entropy(&problem, spec, kind),
    }
}

/// Stable balancing weights via the dual; see the module docs.
pub fn sbw(data: &Dataset, spec: &BalanceSpec, kind: MeanKind) -> Result<WeightFit> {
    fit_weights(data, &BalanceSpec { method: BalanceMethod::Sbw, ..*spec }, kind)
}

/// Entropy balancing with exact balance on every feature.
pub fn entropy(data: &Dataset, spec: &BalanceSpec, kind: MeanKind) -> Result<WeightFit> {
    fit_weights(data, &BalanceSpec { method: BalanceMethod::Entropy, ..*spec }, kind)
}

struct Dual<'a> {
    prob: &'a BalanceProblem,
    lambda: f64,
}

impl Dual<'_> {
    fn scores(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.prob.len()).map(|i| dot(beta, self.prob.row(i))).collect()
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        self.lambda * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
    }

    fn smooth(&self, beta: &[f64]) -> f64 {
        let quad: f64 = self.scores(beta).iter().map(|s| if *s > 0.0 { 0.5 * s * s } else { 0.0 }).sum();
        quad / self.prob.normalizer - dot(beta, &self.prob.target)
    }

    fn value(&self, beta: &[f64]) -> f64 {
        self.smooth(beta) + self.penalty(beta)
    }

    fn weights(&self, beta: &[f64]) -> Vec<f64> {
        self.scores(beta).into_iter().map(|s| s.max(0.0)).collect()
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        self.prob.imbalance(&self.weights(beta))
    }

    fn hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let p = self.prob.p;
        let mut h = DMatrix::zeros(p, p);
        for (i, s) in self.scores(beta).iter().enumerate() {
            if *s > 0.0 {
                let f = self.prob.row(i);
                for a in 0..p {
                    for b in a..p {
                        h[(a, b)] += f[a] * f[b];
                    }
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                h[(a, b)] /= self.prob.normalizer;
                h[(b, a)] = h[(a, b)];
            }
        }
        h
    }

    /// ∞-norm of the minimum-norm element of the subdifferential.
    fn stationarity(&self, beta: &[f64], grad: &[f64]) -> f64 {
        let mut worst = grad[0].abs();
        for j in 1..beta.len() {
            let r = if beta[j] > 0.0 {
                (grad[j] + self.lambda).abs()
            } else if beta[j] < 0.0 {
                (grad[j] - self.lambda).abs()
            } else {
                (grad[j].abs() - self.lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }

    fn prox(&self, v: &mut [f64], step: f64) {
        let thr = self.lambda * step;
        for b in v.iter_mut().skip(1) {
            *b = soft_threshold(*b, thr);
        }
    }
}

/// Any feasible γ has `Σγ = N` and `γ ≥ 0`, so the primal value is at most
/// `N/2`; a dual value below `−N/2` certifies that no weights meet the
/// tolerance.
fn check_dual_bound(dual: &Dual, beta: &[f64]) -> Result<()> {
    let bound = -0.5 * dual.prob.normalizer;
    let value = dual.value(beta);
    if value < bound - 1e-9 * (1.0 + bound.abs()) {
        return Err(Error::Infeasible(format!(
            "dual objective {value:.6e} is below {bound:.6e}; no weights meet the balance tolerance"
        )));
    }
    Ok(())
}

fn soft_threshold(v: f64, thr: f64) -> f64 {
    if v > thr {
        v - thr
    } else if v < -thr {
        v + thr
    } else {
        0.0
    }
}

/// Minimizes `g·(u − β) + ½ (u − β)ᵀ H (u − β) + λ Σ_{j≥1} |u_j|`.
fn newton_subproblem(h: &DMatrix<f64>, g: &[f64], beta: &[f64], lambda: f64) -> Vec<f64> {
    let p = beta.len();
    let scale = h.diagonal().iter().fold(0.0_f64, |m, v| m.max(*v)).max(1e-300);
    let ridge = 1e-12 * scale;
    let hd = |j: usize| h[(j, j)] + ridge;
    let mut u = beta.to_vec();
    // Hd = H (u − β), maintained incrementally
    let mut hd_vec = vec![0.0; p];
    for _sweep in 0..5_000 {
        let mut max_change = 0.0_f64;
        for j in 0..p {
            let b = g[j] + hd_vec[j] - h[(j, j)] * (u[j] - beta[j]);
            let a = hd(j);
            let new = if j == 0 {
                beta[j] - b / a
            } else {
                soft_threshold(a * beta[j] - b, lambda) / a
            };
            let delta = new - u[j];
            if delta != 0.0 {
                for k in 0..p {
                    hd_vec[k] += h[(k, j)] * delta;
                }
                u[j] = new;
                max_change = max_change.max(delta.abs() / (1.0 + new.abs()));
            }
        }
        if max_change <= 1e-15 {
            break;
        }
    }
    polish_subproblem(h, g, beta, lambda, u)
}

/// Re-solves the subproblem exactly on the support found by coordinate
/// descent, keeping the result only if it is sign- and KKT-consistent.
fn polish_subproblem(h: &DMatrix<f64>, g: &[f64], beta: &[f64], lambda: f64, u: Vec<f64>) -> Vec<f64> {
    let p = beta.len();
    let support: Vec<usize> = (0..p).filter(|&j| j == 0 || u[j] != 0.0).collect();
    let sign = |j: usize| if j == 0 { 0.0 } else { u[j].signum() };
    let k = support.len();
    let mut a = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (r, &j) in support.iter().enumerate() {
        let mut v = -g[j] - lambda * sign(j);
        for l in 0..p {
            if !support.contains(&l) {
                v -= h[(j, l)] * (-beta[l]);
            }
        }
        rhs[r] = v;
        for (c, &l) in support.iter().enumerate() {
            a[(r, c)] = h[(j, l)];
        }
    }
    let Some(ch) = a.cholesky() else { return u };
    let d_s = ch.solve(&rhs);
    let mut cand = vec![0.0; p];
    for (r, &j) in support.iter().enumerate() {
        cand[j] = beta[j] + d_s[r];
        if j != 0 && cand[j].signum() != sign(j) {
            return u;
        }
    }
    let d: Vec<f64> = (0..p).map(|j| cand[j] - beta[j]).collect();
    for j in 1..p {
        if !support.contains(&j) {
            let grad_j = g[j] + (0..p).map(|l| h[(j, l)] * d[l]).sum::<f64>();
            if grad_j.abs() > lambda * (1.0 + 1e-9) + 1e-14 {
                return u;
            }
        }
    }
    cand
}

fn solve_sbw_dual(prob: &BalanceProblem, spec: &BalanceSpec, kind: MeanKind) -> Result<WeightFit> {
    let dual = Dual { prob, lambda: spec.tol };
    let p = prob.p;
    let group_size = prob.len() as f64;
    let mut beta = vec![0.0; p];
    beta[0] = prob.normalizer / group_size;

    let (beta, iterations, residual) = match spec.algorithm {
        DualAlgorithm::ProximalNewton => proximal_newton(&dual, &mut beta, spec)?,
        DualAlgorithm::ProximalGradient => proximal_gradient(&dual, &mut beta, spec)?,
    };

    let gamma = dual.weights(&beta);
    let imbalance = prob.imbalance(&gamma);
    let mut warnings = Vec::new();
    let beta_max = beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    if beta_max > spec.beta_cap {
        warnings.push(format!(
            "‖β‖∞ = {beta_max:.3e} exceeds {:.3e}; the balance constraints are close to infeasible",
            spec.beta_cap
        ));
    }
    if gamma.iter().all(|g| *g == 0.0) {
        return Err(Error::ZeroWeightSum);
    }
    Ok(WeightFit {
        kind,
        method: BalanceMethod::Sbw,
        transform: spec.transform,
        rows: prob.rows.clone(),
        objective: dual.value(&beta),
        gamma,
        beta,
        feature_names: prob.feature_names.clone(),
        imbalance,
        iterations,
        residual,
        warnings,
    })
}

fn proximal_newton(dual: &Dual, beta: &mut Vec<f64>, spec: &BalanceSpec) -> Result<(Vec<f64>, usize, f64)> {
    let p = beta.len();
    let mut last_residual = f64::INFINITY;
    for it in 0..spec.max_iter {
        let grad = dual.gradient(beta);
        let residual = dual.stationarity(beta, &grad);
        last_residual = residual;
        if residual <= spec.grad_tol {
            return Ok((beta.clone(), it, residual));
        }
        check_dual_bound(dual, beta)?;
        let h = dual.hessian(beta);
        let u = newton_subproblem(&h, &grad, beta, dual.lambda);
        let d: Vec<f64> = (0..p).map(|j| u[j] - beta[j]).collect();
        let decrease = dot(&grad, &d) + dual.penalty(&u) - dual.penalty(beta);
        let f0 = dual.value(beta);
        let mut accepted = false;
        if decrease < 0.0 {
            let mut t = 1.0;
            for _ in 0..60 {
                let cand: Vec<f64> = (0..p).map(|j| beta[j] + t * d[j]).collect();
                let f1 = dual.value(&cand);
                let armijo = f1 <= f0 + 1e-4 * t * decrease;
                let flat = t == 1.0 && f1 <= f0 + 1e-15 * (1.0 + f0.abs());
                if armijo || flat {
                    *beta = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            // fall back to one backtracking proximal-gradient step
            let mut step = 1.0 / h.diagonal().iter().fold(1e-12_f64, |m, v| m.max(*v)) / p as f64;
            let mut moved = false;
            for _ in 0..60 {
                let mut cand: Vec<f64> = (0..p).map(|j| beta[j] - step * grad[j]).collect();
                dual.prox(&mut cand, step);
                if dual.value(&cand) < f0 {
                    *beta = cand;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                return Err(Error::NoConvergence { iterations: it, residual });
            }
        }
    }
    Err(Error::NoConvergence { iterations: spec.max_iter, residual: last_residual })
}

/// FISTA with backtracking and adaptive restart.
fn proximal_gradient(dual: &Dual, beta: &mut Vec<f64>, spec: &BalanceSpec) -> Result<(Vec<f64>, usize, f64)> {
    let p = beta.len();
    let mut lipschitz = 1.0_f64;
    let mut y = beta.clone();
    let mut momentum = 1.0_f64;
    let mut residual = f64::INFINITY;
    for it in 0..spec.max_iter {
        let grad_y = dual.gradient(&y);
        let smooth_y = dual.smooth(&y);
        let mut next;
        loop {
            next = (0..p).map(|j| y[j] - grad_y[j] / lipschitz).collect::<Vec<_>>();
            dual.prox(&mut next, 1.0 / lipschitz);
            let diff: Vec<f64> = (0..p).map(|j| next[j] - y[j]).collect();
            let model = smooth_y + dot(&grad_y, &diff) + 0.5 * lipschitz * dot(&diff, &diff);
            if dual.smooth(&next) <= model + 1e-15 * (1.0 + smooth_y.abs()) {
                break;
            }
            lipschitz *= 2.0;
            if !lipschitz.is_finite() {
                return Err(Error::NoConvergence { iterations: it, residual });
            }
        }
        let grad_next = dual.gradient(&next);
        residual = dual.stationarity(&next, &grad_next);
        if residual <= spec.grad_tol {
            return Ok((next, it + 1, residual));
        }
        check_dual_bound(dual, &next)?;
        // gradient-based restart; objective values are too flat near the
        // optimum to decide it
        let uphill: f64 = (0..p).map(|j| (y[j] - next[j]) * (next[j] - beta[j])).sum();
        if uphill > 0.0 {
            momentum = 1.0;
            y = next.clone();
            *beta = next;
            continue;
        }
        let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let coef = (momentum - 1.0) / m_next;
        y = (0..p).map(|j| next[j] + coef * (next[j] - beta[j])).collect();
        *beta = next;
        momentum = m_next;
        lipschitz *= 0.9;
    }
    Err(Error::NoConvergence { iterations: spec.max_iter, residual })
}

fn solve_entropy(prob: &BalanceProblem, spec: &BalanceSpec, kind: MeanKind) -> Result<WeightFit> {
    let n = prob.len();
    let p = prob.p;
    let names = &prob.feature_names;
    // non-intercept features that vary within the group
    let mut active = Vec::new();
    for j in 1..p {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            let v = prob.row(i)[j];
            (lo.min(v), hi.max(v))
        });
        let t = prob.target[j];
        let span = (hi - lo).abs().max(t.abs()).max(1.0);
        if hi - lo <= 1e-12 * span {
            if (t - lo).abs() > 1e-10 * span {
                return Err(Error::Infeasible(format!(
                    "feature `{}` is constant ({lo}) in the group but the target is {t}",
                    names[j]
                )));
            }
            continue;
        }
        if !(t > lo && t < hi) {
            return Err(Error::Infeasible(format!(
                "target {t} for feature `{}` lies outside the group range [{lo}, {hi}]",
                names[j]
            )));
        }
        active.push(j);
    }
    let k = active.len();
    let centred = |i: usize, a: usize| prob.row(i)[active[a]] - prob.target[active[a]];
    let log_partition = |theta: &[f64]| -> (f64, Vec<f64>) {
        let s: Vec<f64> = (0..n).map(|i| (0..k).map(|a| theta[a] * centred(i, a)).sum()).collect();
        let smax = s.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let total: f64 = s.iter().map(|v| (v - smax).exp()).sum();
        (smax + total.ln(), s)
    };

    let mut theta = vec![0.0; k];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let max_newton = 200.min(spec.max_iter.max(1));
    let mut converged = k == 0;
    if k == 0 {
        residual = 0.0;
    }
    while !converged && iterations < max_newton {
        let (lz, s) = log_partition(&theta);
        let probs: Vec<f64> = s.iter().map(|v| (v - lz).exp()).collect();
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..n {
            for a in 0..k {
                let ca = centred(i, a);
                grad[a] += probs[i] * ca;
                for b in a..k {
                    hess[(a, b)] += probs[i] * ca * centred(i, b);
                }
            }
        }
        for a in 0..k {
            for b in a..k {
                hess[(a, b)] -= grad[a] * grad[b];
                hess[(b, a)] = hess[(a, b)];
            }
        }
        residual = grad.amax();
        if residual <= 1e-11 {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(step) = spd_solve(&hess, &(-&grad)) else {
            break;
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = (0..k).map(|a| theta[a] + t * step[a]).collect();
            let (lz_new, _) = log_partition(&cand);
            if lz_new <= lz + 1e-4 * t * slope || (t == 1.0 && lz_new <= lz + 1e-15 * (1.0 + lz.abs())) {
                theta = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || theta.iter().any(|v| !v.is_finite() || v.abs() > 1e8) {
            break;
        }
    }
    if !converged {
        return Err(Error::Infeasible(format!(
            "entropy balancing did not reach exact balance (residual {residual:.3e}); \
             the target is likely outside the convex hull of the group features"
        )));
    }

    // γ_i = exp(β·φ_i) with Σγ = N
    let raw: Vec<f64> = (0..n).map(|i| (0..k).map(|a| theta[a] * prob.row(i)[active[a]]).sum()).collect();
    let rmax = raw.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = rmax + raw.iter().map(|v| (v - rmax).exp()).sum::<f64>().ln();
    let mut beta = vec![0.0; p];
    beta[0] = prob.normalizer.ln() - lse;
    for (a, &j) in active.iter().enumerate() {
        beta[j] = theta[a];
    }
    let gamma: Vec<f64> = raw.iter().map(|v| (beta[0] + v).exp()).collect();
    let imbalance = prob.imbalance(&gamma);
    let (objective, _) = log_partition(&theta);
    Ok(WeightFit {
        kind,
        method: BalanceMethod::Entropy,
        transform: spec.transform,
        rows: prob.rows.clone(),
        gamma,
        beta,
        feature_names: prob.feature_names.clone(),
        residual: imbalance.iter().fold(0.0, |m, v| m.max(v.abs())),
        imbalance,
        objective,
        iterations,
        warnings: Vec::new(),
    })
}

/// All weight fits an estimand needs, in `Estimand::components` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandFit {
    pub estimand: Estimand,
    pub fits: Vec<WeightFit>,
}

impl EstimandFit {
    pub fn fit(&self, kind: MeanKind) -> Option<&WeightFit> {
        self.fits.iter().find(|f| f.kind == kind)
    }
}

pub fn fit_estimand(data: &Dataset, spec: &BalanceSpec, estimand: Estimand) -> Result<EstimandFit> {
    let fits = estimand
        .components()
        .iter()
        .map(|&kind| fit_weights(data, spec, kind))
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimandFit { estimand, fits })
}

/// Per-feature balance before and after weighting, as group mean minus
/// target mean (standardized units when the data are).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub feature: String,
    pub delta_pre: f64,
    pub delta_post: f64,
}

/// Balance of every non-intercept feature of φ for a fitted mean.
pub fn balance_table(data: &Dataset, fit: &WeightFit) -> Result<Vec<BalanceRow>> {
    let prob = BalanceProblem::new(data, fit.kind, fit.transform);
    if prob.rows != fit.rows {
        return Err(Error::Dimension("fit does not belong to this dataset".into()));
    }
    let total: f64 = fit.gamma.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let m = prob.len() as f64;
    Ok((1..prob.p)
        .map(|j| {
            let (mut plain, mut weighted) = (0.0, 0.0);
            for (i, g) in fit.gamma.iter().enumerate() {
                let f = prob.row(i)[j];
                plain += f;
                weighted += g * f;
            }
            BalanceRow {
                feature: prob.feature_names[j].clone(),
                delta_pre: plain / m - prob.target[j],
                delta_post: weighted / total - prob.target[j],
            }
        })
        .collect())
}

/// Unweighted treated mean, the identified half of the ATT.
pub fn treated_mean(data: &Dataset) -> f64 {
    let rows = data.rows_in(Group::Treated);
    rows.iter().map(|&i| data.y()[i]).sum::<f64>() / rows.len() as f64
}

/// Hájek point estimate of the estimand.
pub fn point_estimate(data: &Dataset, fit: &EstimandFit) -> Result<f64> {
    let mean = |kind: MeanKind| -> Result<f64> {
        fit.fit(kind)
            .ok_or_else(|| Error::Config(format!("fit for {} is missing", kind.name())))?
            .hajek_estimate(data)
    };
    match fit.estimand {
        Estimand::Mu1 => mean(MeanKind::Mu1),
        Estimand::Mu0 => mean(MeanKind::Mu0),
        Estimand::Mu01 => mean(MeanKind::Mu01),
        Estimand::Ate => Ok(mean(MeanKind::Mu1)? - mean(MeanKind::Mu0)?),
        Estimand::Att => Ok(treated_mean(data) - mean(MeanKind::Mu01)?),
    }
}
