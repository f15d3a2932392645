//! Finite-sample amplification of a sensitivity analysis.
//!
//! The error of the weighted estimate against oracle weights that exactly
//! balance the relevant potential outcome factors as `δ_u · β_u`: the
//! imbalance of the confounding component `U` times its outcome coefficient.
//! At Λ* the extrema bound this error by `E`, and the hyperbola
//! `δ · β = E` is compared with observed covariates used as benchmarks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::balancer::{hajek, EstimandFit, WeightFit};
use crate::data::{BalanceTarget, Dataset, Estimand, Group, Interval, MeanKind, Scaling};
use crate::error::{Error, Result};
use crate::linalg::ols;
use crate::sensitivity::extrema_for;

/// Weights closest (in generalized KL) to the fitted weights that make the
/// group's weighted potential-outcome mean equal the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    /// `γ̊_i = γ̂_i · exp(tilt · (Y_i − target))`.
    pub oracle_gamma: Vec<f64>,
    pub tilt: f64,
    pub target: f64,
    /// Hájek mean under the oracle weights.
    pub achieved_target: f64,
}

/// Exponential tilt of `gamma` along `y` whose Hájek mean hits `target`.
///
/// `γ̂ · exp(t (y − T))` minimizes `Σ γ log(γ/γ̂) − γ + γ̂` subject to
/// `Σ γ (y − T) = 0`, so `t = 0` when the base weights already balance.
pub fn oracle_tilt(y: &[f64], gamma: &[f64], target: f64) -> Result<OracleFit> {
    if y.is_empty() || y.len() != gamma.len() {
        return Err(Error::Dimension(format!("{} outcomes for {} weights", y.len(), gamma.len())));
    }
    if !target.is_finite() {
        return Err(Error::Domain("oracle target must be finite".into()));
    }
    let base_mean = hajek(y, gamma)?;
    let support: Vec<usize> = (0..y.len()).filter(|&i| gamma[i] > 0.0).collect();
    let scale = support.iter().fold(0.0_f64, |m, &i| m.max((y[i] - target).abs()));
    let finish = |tilt: f64| -> Result<OracleFit> {
        let oracle_gamma: Vec<f64> = y
            .iter()
            .zip(gamma)
            .map(|(yi, g)| if *g > 0.0 { g * (tilt * (yi - target)).exp() } else { 0.0 })
            .collect();
        let achieved_target = hajek(y, &oracle_gamma)?;
        Ok(OracleFit { oracle_gamma, tilt, target, achieved_target })
    };
    if base_mean == target || scale == 0.0 {
        return finish(0.0);
    }
    let (lo_y, hi_y) = support
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(y[i]), hi.max(y[i])));
    if !(target > lo_y && target < hi_y) {
        return Err(Error::Infeasible(format!(
            "oracle target {target} outside the open outcome range ({lo_y}, {hi_y})"
        )));
    }
    // work in τ = t·scale with centred, scaled outcomes u ∈ [−1, 1]
    let u: Vec<f64> = support.iter().map(|&i| (y[i] - target) / scale).collect();
    let lg: Vec<f64> = support.iter().map(|&i| gamma[i].ln()).collect();
    // tilted mean of u and its derivative (tilted variance)
    let moments = |tau: f64| -> (f64, f64) {
        let s: Vec<f64> = lg.iter().zip(&u).map(|(l, ui)| l + tau * ui).collect();
        let smax = s.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (si, ui) in s.iter().zip(&u) {
            let w = (si - smax).exp();
            z += w;
            m1 += w * ui;
            m2 += w * ui * ui;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    };
    let (mut lo, mut hi) = if base_mean < target { (0.0, 1.0) } else { (-1.0, 0.0) };
    for _ in 0..200 {
        if moments(lo).0 <= 0.0 && moments(hi).0 >= 0.0 {
            break;
        }
        if moments(hi).0 < 0.0 {
            lo = hi;
            hi *= 2.0;
        } else {
            hi = lo;
            lo *= 2.0;
        }
    }
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..500 {
        let (g, var) = moments(tau);
        if g.abs() <= 1e-15 {
            break;
        }
        if g > 0.0 {
            hi = tau;
        } else {
            lo = tau;
        }
        let newton = tau - g / var;
        tau = if var > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-16 * (1.0 + tau.abs()) {
            break;
        }
    }
    let fit = finish(tau / scale)?;
    if (fit.achieved_target - target).abs() > 1e-10 * (1.0 + scale) {
        return Err(Error::NoConvergence { iterations: 500, residual: fit.achieved_target - target });
    }
    Ok(fit)
}

fn target_rows(data: &Dataset, kind: MeanKind) -> Vec<usize> {
    match kind.target() {
        BalanceTarget::FullSample => (0..data.n()).collect(),
        BalanceTarget::Treated => data.rows_in(Group::Treated),
    }
}

/// Oracle weights for a fitted mean when the relevant potential outcome is
/// known for every row (simulation use). `potential[i]` is Y_i(1) for μ1 and
/// Y_i(0) for μ0 / μ01.
pub fn oracle_weights(data: &Dataset, potential: &[f64], fit: &WeightFit) -> Result<OracleFit> {
    if potential.len() != data.n() {
        return Err(Error::Dimension(format!("{} potential outcomes for {} rows", potential.len(), data.n())));
    }
    let rows = target_rows(data, fit.kind);
    let target = rows.iter().map(|&i| potential[i]).sum::<f64>() / rows.len() as f64;
    let y: Vec<f64> = fit.rows.iter().map(|&i| potential[i]).collect();
    oracle_tilt(&y, &fit.gamma, target)
}

/// `[inf μ̂^(h) − μ̂, sup μ̂^(h) − μ̂]` at Λ for one fitted mean.
pub fn error_bounds(data: &Dataset, fit: &WeightFit, lambda: f64) -> Result<Interval> {
    let est = fit.hajek_estimate(data)?;
    let e = extrema_for(data, fit, lambda)?;
    Ok(Interval { lo: e.min_est - est, hi: e.max_est - est })
}

/// The weighted mean whose error the amplification describes.
pub fn amplified_mean(estimand: Estimand) -> Result<MeanKind> {
    match estimand {
        Estimand::Mu1 => Ok(MeanKind::Mu1),
        Estimand::Mu0 => Ok(MeanKind::Mu0),
        Estimand::Mu01 | Estimand::Att => Ok(MeanKind::Mu01),
        Estimand::Ate => Err(Error::UnsupportedEstimand(estimand.to_string())),
    }
}

/// Split of one covariate into the part explained by treatment (`U`) and
/// the orthogonal remainder (`W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSplit {
    pub name: String,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    /// Target mean of W minus its Hájek-weighted group mean; the residual W
    /// is not exactly balanced in general.
    pub w_imbalance: f64,
}

/// One observed covariate placed on the (δ, β) plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub delta_pre: f64,
    pub delta_post: f64,
    /// |coefficient| in the joint outcome regression.
    pub beta_hat: f64,
    /// Target mean minus unweighted group mean.
    pub delta_pre_signed: f64,
    /// Target mean minus weighted group mean.
    pub delta_post_signed: f64,
    pub beta_hat_signed: f64,
    pub beta_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub splits: Vec<CovariateSplit>,
    pub benchmarks: Vec<Benchmark>,
    /// Covariates left out of the benchmarks, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Per-covariate U/W split and benchmark coordinates for a fitted mean.
/// Expects standardized covariates; `scaling` marks constant columns.
pub fn decompose(data: &Dataset, fit: &WeightFit, scaling: Option<&Scaling>) -> Result<Decomposition> {
    let n = data.n();
    let x = data.x();
    let z = data.z();
    let targets = target_rows(data, fit.kind);
    let wsum: f64 = fit.gamma.iter().sum();
    if wsum == 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut splits = Vec::with_capacity(data.d());
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    let (n1, n0) = (data.n1() as f64, data.n0() as f64);
    let mean_over = |col: &dyn Fn(usize) -> f64, rows: &[usize]| rows.iter().map(|&i| col(i)).sum::<f64>() / rows.len() as f64;
    let weighted = |col: &dyn Fn(usize) -> f64| {
        fit.rows.iter().zip(&fit.gamma).map(|(&i, g)| g * col(i)).sum::<f64>() / wsum
    };
    for (j, name) in data.names().iter().enumerate() {
        let a = |i: usize| x[(i, j)];
        // OLS of A on (1, Z): fitted values are the arm means
        let (mut s1, mut s0) = (0.0, 0.0);
        for i in 0..n {
            if z[i] {
                s1 += a(i);
            } else {
                s0 += a(i);
            }
        }
        let (m1, m0) = (s1 / n1, s0 / n0);
        let u: Vec<f64> = (0..n).map(|i| if z[i] { m1 } else { m0 }).collect();
        let w: Vec<f64> = (0..n).map(|i| a(i) - u[i]).collect();
        let w_imbalance = mean_over(&|i| w[i], &targets) - weighted(&|i| w[i]);
        splits.push(CovariateSplit { name: name.clone(), u, w, w_imbalance });

        if scaling.is_some_and(|s| s.constant.get(j).copied().unwrap_or(false)) {
            skipped.push((name.clone(), "constant in the full sample".to_string()));
            continue;
        }
        let first = a(fit.rows[0]);
        if fit.rows.iter().all(|&i| a(i) == first) {
            skipped.push((name.clone(), "constant within the reweighted group".to_string()));
            continue;
        }
        usable.push(j);
    }
    if usable.is_empty() {
        return Err(Error::NoBenchmarks);
    }
    // joint regression of the group outcome on all usable covariates
    let g = fit.rows.len();
    let design = DMatrix::from_fn(g, usable.len() + 1, |r, c| if c == 0 { 1.0 } else { x[(fit.rows[r], usable[c - 1])] });
    let y: Vec<f64> = fit.group_outcomes(data);
    let reg = ols(&design, &y)?;
    let group_rows = &fit.rows;
    let benchmarks = usable
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let a = |i: usize| x[(i, j)];
            let target = mean_over(&a, &targets);
            let pre = target - mean_over(&a, group_rows);
            let post = target - weighted(&a);
            Benchmark {
                name: data.names()[j].clone(),
                delta_pre: pre.abs(),
                delta_post: post.abs(),
                beta_hat: reg.coef[k + 1].abs(),
                delta_pre_signed: pre,
                delta_post_signed: post,
                beta_hat_signed: reg.coef[k + 1],
                beta_se: reg.se[k + 1],
            }
        })
        .collect();
    Ok(Decomposition { splits, benchmarks, skipped })
}

/// Samples of the curve `δ · β = E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub error_bound: f64,
    pub points: Vec<(f64, f64)>,
    /// Set when `E = 0`: no confounding is needed to overturn the result.
    pub no_confounding_needed: bool,
}

/// Log-spaced samples of `δ · β = E` over a δ range that covers every
/// benchmark imbalance and every benchmark strength.
pub fn contour(error_bound: f64, benchmarks: &[Benchmark], grid: usize) -> Result<Contour> {
    if !(error_bound >= 0.0) || !error_bound.is_finite() {
        return Err(Error::Domain(format!("error bound must be finite and ≥ 0, got {error_bound}")));
    }
    if error_bound == 0.0 {
        return Ok(Contour { error_bound, points: Vec::new(), no_confounding_needed: true });
    }
    if grid < 2 {
        return Err(Error::Domain("contour grid needs at least 2 points".into()));
    }
    let mut cands: Vec<f64> = Vec::new();
    for b in benchmarks {
        cands.extend([b.delta_pre, b.delta_post]);
        if b.beta_hat > 0.0 {
            cands.push(error_bound / b.beta_hat);
        }
    }
    cands.retain(|v| *v > 0.0 && v.is_finite());
    let (lo, hi) = if cands.is_empty() {
        (error_bound * 1e-2, error_bound * 1e2)
    } else {
        let lo = cands.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let hi = cands.iter().fold(0.0_f64, |m, v| m.max(*v));
        (lo / 2.0, hi * 2.0)
    };
    let ratio = (hi / lo).ln();
    let points = (0..grid)
        .map(|k| {
            let delta = lo * (ratio * k as f64 / (grid - 1) as f64).exp();
            (delta, error_bound / delta)
        })
        .collect();
    Ok(Contour { error_bound, points, no_confounding_needed: false })
}

/// Convex hull (counter-clockwise, no repeated first vertex).
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// The post-weighting benchmark region: hull of the (δ_post, β̂) points,
/// the origin, `(0, max β̂)` and `(max δ_post, 0)`.
pub fn benchmark_hull(benchmarks: &[Benchmark]) -> Vec<(f64, f64)> {
    let max_beta = benchmarks.iter().fold(0.0_f64, |m, b| m.max(b.beta_hat));
    let max_delta = benchmarks.iter().fold(0.0_f64, |m, b| m.max(b.delta_post));
    let mut pts: Vec<(f64, f64)> = benchmarks.iter().map(|b| (b.delta_post, b.beta_hat)).collect();
    pts.extend([(0.0, 0.0), (0.0, max_beta), (max_delta, 0.0)]);
    convex_hull(&pts)
}

/// Whether `p` lies in the closed convex polygon (CCW vertices).
pub fn in_convex_polygon(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    match poly.len() {
        0 => false,
        1 => poly[0] == p,
        2 => {
            let (a, b) = (poly[0], poly[1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            cross.abs() <= 1e-12
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        k => (0..k).all(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % k]);
            (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= -1e-12
        }),
    }
}

/// Largest `δ·β` over a convex polygon in the positive quadrant. The product
/// is quadratic along each edge, so the maximum sits at a vertex or at an
/// edge's interior critical point.
pub fn max_product(poly: &[(f64, f64)]) -> f64 {
    let k = poly.len();
    let mut best = poly.iter().fold(0.0_f64, |m, p| m.max(p.0 * p.1));
    for i in 0..k {
        let (a, b) = (poly[i], poly[(i + 1) % k]);
        let (dd, db) = (b.0 - a.0, b.1 - a.1);
        let curv = dd * db;
        if curv < 0.0 {
            let s = -(a.0 * db + a.1 * dd) / (2.0 * curv);
            if s > 0.0 && s < 1.0 {
                best = best.max((a.0 + s * dd) * (a.1 + s * db));
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    /// The error curve reaches the post-weighting benchmark region.
    Sensitive,
    /// The curve passes between the region and the (max δ_pre, max β̂) corner.
    Ambiguous,
    /// The curve passes above and to the right of (max δ_pre, max β̂).
    Robust,
}

/// Reads the contour against the benchmarks.
pub fn classify(error_bound: f64, benchmarks: &[Benchmark]) -> Result<Verdict> {
    if benchmarks.is_empty() {
        return Err(Error::NoBenchmarks);
    }
    if !(error_bound > 0.0) {
        return Err(Error::EmptyCurve);
    }
    let hull = benchmark_hull(benchmarks);
    if max_product(&hull) >= error_bound {
        return Ok(Verdict::Sensitive);
    }
    let max_pre = benchmarks.iter().fold(0.0_f64, |m, b| m.max(b.delta_pre));
    let max_beta = benchmarks.iter().fold(0.0_f64, |m, b| m.max(b.beta_hat));
    if max_pre * max_beta < error_bound {
        Ok(Verdict::Robust)
    } else {
        Ok(Verdict::Ambiguous)
    }
}

/// Everything needed for a contour plot at one Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationResult {
    pub estimand: Estimand,
    pub mean: MeanKind,
    pub lambda: f64,
    pub error_bounds: Interval,
    /// `max(|lower|, |upper|)` of the error bounds.
    pub error_bound: f64,
    pub curve: Contour,
    pub benchmarks: Vec<Benchmark>,
    pub skipped: Vec<(String, String)>,
    pub hull: Vec<(f64, f64)>,
    /// `None` when the curve is empty.
    pub verdict: Option<Verdict>,
}

/// Error bound at Λ, contour, benchmarks, region and verdict. `data` must
/// be the (standardized) sample the fit was computed on.
pub fn amplify(
    data: &Dataset,
    fit: &EstimandFit,
    scaling: Option<&Scaling>,
    lambda: f64,
    grid: usize,
) -> Result<AmplificationResult> {
    let mean = amplified_mean(fit.estimand)?;
    let wf = fit
        .fit(mean)
        .ok_or_else(|| Error::Config(format!("fit for {} is missing", mean.name())))?;
    let bounds = error_bounds(data, wf, lambda)?;
    let error_bound = bounds.lo.abs().max(bounds.hi.abs());
    let dec = decompose(data, wf, scaling)?;
    let curve = contour(error_bound, &dec.benchmarks, grid)?;
    let verdict = if curve.no_confounding_needed { None } else { Some(classify(error_bound, &dec.benchmarks)?) };
    Ok(AmplificationResult {
        estimand: fit.estimand,
        mean,
        lambda,
        error_bounds: bounds,
        error_bound,
        hull: benchmark_hull(&dec.benchmarks),
        curve,
        benchmarks: dec.benchmarks,
        skipped: dec.skipped,
        verdict,
    })
}
