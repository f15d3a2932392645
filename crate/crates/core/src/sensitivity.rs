//! Shifted estimators under the marginal sensitivity model and the exact
//! range of the shifted Hájek estimate over all per-unit odds-ratio
//! perturbations `r_i ∈ [Λ⁻¹, Λ]`.
//!
//! Every shifted weight is affine in one box variable, `w_i = a_i + b_i v_i`
//! with `v_i ∈ [Λ⁻¹, Λ]`:
//!
//! * inverse-probability form: `w_i = 1 + (γ_i − 1) r_i`, so `a = 1`,
//!   `b = γ − 1`, `v = r`;
//! * odds form: `w_i = γ_i / r_i`, so `a = 0`, `b = γ`, `v = 1/r`.
//!
//! The ratio `Σ w_i Y_i / Σ w_i` is then a linear-fractional function on a
//! box, maximized at a vertex. Dinkelbach's iteration solves it exactly: for
//! a candidate value `t` the parametric problem `max Σ w_i (Y_i − t)`
//! separates per unit.

use serde::{Deserialize, Serialize};

use crate::balancer::{hajek, treated_mean, EstimandFit, WeightFit};
use crate::data::{Dataset, Estimand, Interval, MeanKind, ShiftForm};
use crate::error::{Error, Result};

/// Λ plus the estimand it applies to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub lambda_sens: f64,
    pub estimand: Estimand,
}

impl ShiftSpec {
    pub fn new(lambda_sens: f64, estimand: Estimand) -> Result<Self> {
        check_lambda(lambda_sens)?;
        Ok(ShiftSpec { lambda_sens, estimand })
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 1.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("Λ must be a finite value ≥ 1, got {lambda}")))
    }
}

/// Range of the shifted estimate over the sensitivity box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremaResult {
    pub min_est: f64,
    pub max_est: f64,
    /// Odds ratios `r_i` attaining the minimum (group order).
    pub argmin_r: Vec<f64>,
    pub argmax_r: Vec<f64>,
    pub iterations: usize,
    /// The shifted denominator can reach zero inside the box, so the range
    /// is the whole real line.
    pub unbounded: bool,
}

impl ExtremaResult {
    pub fn range(&self) -> Interval {
        Interval { lo: self.min_est, hi: self.max_est }
    }
}

/// Elementwise shifted weights for log odds-ratio perturbations `h`.
pub fn shift_weights(gamma: &[f64], h: &[f64], form: ShiftForm, lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if gamma.len() != h.len() {
        return Err(Error::Dimension(format!("{} weights but {} shifts", gamma.len(), h.len())));
    }
    let bound = lambda.ln();
    for (index, v) in h.iter().enumerate() {
        if !(v.abs() <= bound + 1e-12) {
            return Err(Error::HOutOfRange { index, value: *v, bound });
        }
    }
    Ok(gamma
        .iter()
        .zip(h)
        .map(|(g, hv)| match form {
            ShiftForm::InverseProbability => 1.0 + (g - 1.0) * hv.exp(),
            ShiftForm::Odds => g * (-hv).exp(),
        })
        .collect())
}

/// Hájek estimate with shifted weights.
pub fn shifted_estimate(y: &[f64], gamma: &[f64], h: &[f64], form: ShiftForm, lambda: f64) -> Result<f64> {
    let w = shift_weights(gamma, h, form, lambda)?;
    hajek(y, &w)
}

/// Shifted estimate of a fitted weighted mean.
pub fn shifted_estimate_for(data: &Dataset, fit: &WeightFit, h: &[f64], lambda: f64) -> Result<f64> {
    shifted_estimate(&fit.group_outcomes(data), &fit.gamma, h, fit.kind.shift_form(), lambda)
}

fn coefficients(gamma: &[f64], form: ShiftForm) -> (Vec<f64>, Vec<f64>) {
    match form {
        ShiftForm::InverseProbability => (vec![1.0; gamma.len()], gamma.iter().map(|g| g - 1.0).collect()),
        ShiftForm::Odds => (vec![0.0; gamma.len()], gamma.to_vec()),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Sense {
    Max,
    Min,
}

const MAX_DINKELBACH: usize = 10_000;

fn vertex_value(a: &[f64], b: &[f64], y: &[f64], v: &[f64]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        let w = a[i] + b[i] * v[i];
        num += w * y[i];
        den += w;
    }
    (num, den)
}

fn dinkelbach(a: &[f64], b: &[f64], y: &[f64], lambda: f64, sense: Sense) -> Result<(f64, Vec<f64>, usize)> {
    let lo = 1.0 / lambda;
    let n = y.len();
    let ones = vec![1.0; n];
    let (num, den) = vertex_value(a, b, y, &ones);
    let mut t = num / den;
    let mut v = vec![lo; n];
    let mut prev: Option<Vec<f64>> = None;
    for it in 1..=MAX_DINKELBACH {
        for i in 0..n {
            let c = b[i] * (y[i] - t);
            let up = match sense {
                Sense::Max => c > 0.0,
                Sense::Min => c < 0.0,
            };
            v[i] = if up { lambda } else { lo };
        }
        let (num, den) = vertex_value(a, b, y, &v);
        let gap = (num - t * den).abs();
        let value = num / den;
        let improved = match sense {
            Sense::Max => value > t,
            Sense::Min => value < t,
        };
        if gap <= 1e-10 * den || prev.as_deref() == Some(&v[..]) || !improved {
            let best = if improved { value } else { t };
            let best_v = if improved { v } else { prev.unwrap_or(v) };
            return Ok((best, best_v, it));
        }
        t = value;
        prev = Some(v.clone());
    }
    Err(Error::NoConvergence { iterations: MAX_DINKELBACH, residual: f64::NAN })
}

/// Exact minimum and maximum of the shifted Hájek estimate over the box
/// `r ∈ [Λ⁻¹, Λ]ⁿ` for a group with outcomes `y` and weights `gamma`.
///
/// Ties in the per-unit rule (zero contribution) go to `Λ⁻¹` in the box
/// variable.
pub fn extrema(y: &[f64], gamma: &[f64], form: ShiftForm, lambda: f64) -> Result<ExtremaResult> {
    check_lambda(lambda)?;
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    if y.len() != gamma.len() {
        return Err(Error::Dimension(format!("{} outcomes but {} weights", y.len(), gamma.len())));
    }
    let (a, b) = coefficients(gamma, form);
    let lo = 1.0 / lambda;
    let den_min: f64 = (0..y.len()).map(|i| (a[i] + b[i] * lo).min(a[i] + b[i] * lambda)).sum();
    let to_r = |v: Vec<f64>| -> Vec<f64> {
        match form {
            ShiftForm::InverseProbability => v,
            ShiftForm::Odds => v.into_iter().map(|s| 1.0 / s).collect(),
        }
    };
    if !(den_min > 0.0) {
        let den_max: f64 = (0..y.len()).map(|i| (a[i] + b[i] * lo).max(a[i] + b[i] * lambda)).sum();
        if !(den_max > 0.0) {
            return Err(Error::ZeroWeightSum);
        }
        return Ok(ExtremaResult {
            min_est: f64::NEG_INFINITY,
            max_est: f64::INFINITY,
            argmin_r: Vec::new(),
            argmax_r: Vec::new(),
            iterations: 0,
            unbounded: true,
        });
    }
    let (max_est, vmax, it_max) = dinkelbach(&a, &b, y, lambda, Sense::Max)?;
    let (min_est, vmin, it_min) = dinkelbach(&a, &b, y, lambda, Sense::Min)?;
    Ok(ExtremaResult {
        min_est,
        max_est,
        argmin_r: to_r(vmin),
        argmax_r: to_r(vmax),
        iterations: it_max + it_min,
        unbounded: false,
    })
}

/// Extrema for a fitted weighted mean.
pub fn extrema_for(data: &Dataset, fit: &WeightFit, lambda: f64) -> Result<ExtremaResult> {
    extrema(&fit.group_outcomes(data), &fit.gamma, fit.kind.shift_form(), lambda)
}

/// `[L_μ1 − U_μ0, U_μ1 − L_μ0]`.
pub fn combine_ate(mu1: Interval, mu0: Interval) -> Interval {
    Interval { lo: mu1.lo - mu0.hi, hi: mu1.hi - mu0.lo }
}

/// Range of the estimand's point estimate at Λ, composed from the extrema
/// of its weighted means.
pub fn estimate_range(data: &Dataset, fit: &EstimandFit, lambda: f64) -> Result<Interval> {
    let range = |kind: MeanKind| -> Result<Interval> {
        let f = fit
            .fit(kind)
            .ok_or_else(|| Error::Config(format!("fit for {} is missing", kind.name())))?;
        Ok(extrema_for(data, f, lambda)?.range())
    };
    Ok(match fit.estimand {
        Estimand::Mu1 => range(MeanKind::Mu1)?,
        Estimand::Mu0 => range(MeanKind::Mu0)?,
        Estimand::Mu01 => range(MeanKind::Mu01)?,
        Estimand::Ate => combine_ate(range(MeanKind::Mu1)?, range(MeanKind::Mu0)?),
        Estimand::Att => {
            let r = range(MeanKind::Mu01)?;
            let m = treated_mean(data);
            Interval { lo: m - r.hi, hi: m - r.lo }
        }
    })
}
