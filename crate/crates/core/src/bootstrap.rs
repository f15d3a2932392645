//! Percentile-bootstrap sensitivity intervals and the Λ* search.
//!
//! Each replicate resamples `n` rows with replacement without conditioning on
//! treatment, re-fits the balancing weights and keeps the per-unit outcomes and
//! weights. The fitted replicates do not depend on Λ, so one preparation
//! serves every Λ evaluated afterwards; with a fixed seed the replicate
//! ranges are nested in Λ and so are the resulting intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancer::{fit_estimand, point_estimate, BalanceSpec};
use crate::data::{standardize, Dataset, Estimand, Interval, SensConfig, ShiftForm};
use crate::error::{Error, Result};
use crate::sensitivity::{check_lambda, combine_ate, estimate_range, extrema};

/// Resampling law parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub b_reps: usize,
    pub seed: u64,
    /// Redraws allowed per replicate when a draw leaves a group empty.
    pub max_redraws: usize,
    /// Largest tolerated fraction of replicates whose weight fit fails.
    pub max_drop_fraction: f64,
}

impl BootstrapPlan {
    pub fn new(b_reps: usize, seed: u64) -> Result<Self> {
        if b_reps < 2 {
            return Err(Error::Domain(format!("B must be at least 2, got {b_reps}")));
        }
        Ok(BootstrapPlan { b_reps, seed, max_redraws: 100, max_drop_fraction: 0.01 })
    }

    pub fn from_config(sens: &SensConfig) -> Result<Self> {
        Self::new(sens.b_reps, sens.seed)
    }
}

/// Independent stream for replicate `index` under a root seed.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `z.len()` row indices with replacement, redrawing whenever a
/// treatment group comes out empty. Returns the indices and the number of
/// redraws used.
pub fn resample_indices<R: Rng + ?Sized>(z: &[bool], rng: &mut R, max_redraws: usize) -> Result<(Vec<usize>, usize)> {
    let n = z.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut redraws = 0;
    loop {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let treated = idx.iter().filter(|&&i| z[i]).count();
        if treated > 0 && treated < n {
            return Ok((idx, redraws));
        }
        if redraws == max_redraws {
            return Err(Error::DegenerateResampling { redraws });
        }
        redraws += 1;
    }
}

/// One bootstrap dataset plus the redraw count.
pub fn resample<R: Rng + ?Sized>(data: &Dataset, rng: &mut R, max_redraws: usize) -> Result<(Dataset, usize)> {
    let (idx, redraws) = resample_indices(data.z(), rng, max_redraws)?;
    Ok((data.subset(&idx)?, redraws))
}

/// Nearest-rank quantile: the value at 1-based rank ⌈pB⌉ of the sorted
/// values, clamped to `[1, B]`.
pub fn quantile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let b = sorted.len();
    // the offset absorbs rounding in p·B (e.g. 0.975 · 1000)
    let rank = (p * b as f64 - 1e-7).ceil().clamp(1.0, b as f64) as usize;
    sorted[rank - 1]
}

fn sorted_copy(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN in bootstrap values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `[Q_{α/2}, Q_{1−α/2}]` of the values.
pub fn percentile_ci(values: &[f64], alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    let s = sorted_copy(values)?;
    Ok(Interval { lo: quantile_nearest_rank(&s, alpha / 2.0), hi: quantile_nearest_rank(&s, 1.0 - alpha / 2.0) })
}

/// `[Q_{α/2}(lower), Q_{1−α/2}(upper)]`.
pub fn bounds_ci(lower: &[f64], upper: &[f64], alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    let lo = quantile_nearest_rank(&sorted_copy(lower)?, alpha / 2.0);
    let hi = quantile_nearest_rank(&sorted_copy(upper)?, 1.0 - alpha / 2.0);
    Ok(Interval { lo, hi })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("α must lie in (0, 1), got {alpha}")))
    }
}

/// Interval result at one Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub estimand: Estimand,
    pub lambda: f64,
    pub alpha: f64,
    pub point_estimate: f64,
    /// Range of the point estimate over the sensitivity set, original data.
    pub estimate_range: Interval,
    pub ci: Interval,
    pub b_reps: usize,
    pub b_used: usize,
    pub dropped: usize,
    pub redraws: usize,
    /// Replicates whose shifted denominator could reach zero.
    pub unbounded_replicates: usize,
}

#[derive(Debug, Clone)]
struct GroupDraw {
    y: Vec<f64>,
    gamma: Vec<f64>,
    form: ShiftForm,
}

#[derive(Debug, Clone)]
struct Replicate {
    groups: Vec<GroupDraw>,
    treated_mean: f64,
}

/// Original fit plus all fitted bootstrap replicates for one estimand.
#[derive(Debug, Clone)]
pub struct BootstrapAnalysis {
    estimand: Estimand,
    data: Dataset,
    original: crate::balancer::EstimandFit,
    point_estimate: f64,
    replicates: Vec<Replicate>,
    b_reps: usize,
    dropped: usize,
    redraws: usize,
}

impl BootstrapAnalysis {
    /// Fits the original sample and `B` replicates. Covariates are
    /// standardized once on the given sample; replicates reuse that
    /// transform.
    pub fn prepare(data: &Dataset, spec: &BalanceSpec, plan: &BootstrapPlan, estimand: Estimand) -> Result<Self> {
        if plan.b_reps < 2 {
            return Err(Error::Domain(format!("B must be at least 2, got {}", plan.b_reps)));
        }
        let (data, _) = standardize(data);
        let original = fit_estimand(&data, spec, estimand)?;
        let point_estimate = point_estimate(&data, &original)?;

        let outcomes: Vec<Result<Option<(Replicate, usize)>>> = (0..plan.b_reps)
            .into_par_iter()
            .map(|b| {
                let mut rng = replicate_rng(plan.seed, b as u64);
                let (boot, redraws) = resample(&data, &mut rng, plan.max_redraws)?;
                match fit_estimand(&boot, spec, estimand) {
                    Ok(fit) => {
                        let groups = fit
                            .fits
                            .iter()
                            .map(|f| GroupDraw {
                                y: f.group_outcomes(&boot),
                                gamma: f.gamma.clone(),
                                form: f.kind.shift_form(),
                            })
                            .collect();
                        let treated_mean = crate::balancer::treated_mean(&boot);
                        Ok(Some((Replicate { groups, treated_mean }, redraws)))
                    }
                    Err(e) if e.is_solver_error() => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();

        let mut replicates = Vec::with_capacity(plan.b_reps);
        let mut dropped = 0;
        let mut redraws = 0;
        for outcome in outcomes {
            match outcome? {
                Some((rep, r)) => {
                    replicates.push(rep);
                    redraws += r;
                }
                None => dropped += 1,
            }
        }
        if dropped as f64 > plan.max_drop_fraction * plan.b_reps as f64 {
            return Err(Error::TooManyDropped { dropped, total: plan.b_reps });
        }
        Ok(BootstrapAnalysis {
            estimand,
            data,
            original,
            point_estimate,
            replicates,
            b_reps: plan.b_reps,
            dropped,
            redraws,
        })
    }

    pub fn estimand(&self) -> Estimand {
        self.estimand
    }

    pub fn point_estimate(&self) -> f64 {
        self.point_estimate
    }

    /// Standardized copy of the data the analysis was fitted on.
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn original_fit(&self) -> &crate::balancer::EstimandFit {
        &self.original
    }

    pub fn b_used(&self) -> usize {
        self.replicates.len()
    }

    /// Per-replicate extrema of each weighted mean at Λ, replicate order.
    fn replicate_ranges(&self, lambda: f64) -> Result<Vec<Vec<Interval>>> {
        self.replicates
            .par_iter()
            .map(|rep| {
                rep.groups
                    .iter()
                    .map(|g| extrema(&g.y, &g.gamma, g.form, lambda).map(|e| e.range()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// Per-replicate point estimates (Λ = 1) of the estimand.
    pub fn replicate_estimates(&self) -> Result<Vec<f64>> {
        let ranges = self.replicate_ranges(1.0)?;
        Ok(ranges
            .iter()
            .zip(&self.replicates)
            .map(|(r, rep)| self.compose(r, rep.treated_mean).lo)
            .collect())
    }

    fn compose(&self, ranges: &[Interval], treated_mean: f64) -> Interval {
        match self.estimand {
            Estimand::Mu1 | Estimand::Mu0 | Estimand::Mu01 => ranges[0],
            Estimand::Att => Interval { lo: treated_mean - ranges[0].hi, hi: treated_mean - ranges[0].lo },
            Estimand::Ate => combine_ate(ranges[0], ranges[1]),
        }
    }

    /// Sensitivity interval at Λ.
    pub fn interval(&self, lambda: f64, alpha: f64) -> Result<SensitivityResult> {
        check_lambda(lambda)?;
        check_alpha(alpha)?;
        let ranges = self.replicate_ranges(lambda)?;
        let unbounded_replicates = ranges
            .iter()
            .filter(|r| r.iter().any(|i| i.lo.is_infinite() || i.hi.is_infinite()))
            .count();
        let ci = match self.estimand {
            Estimand::Ate => {
                // α split evenly between the two means
                let side = |k: usize| {
                    let lo: Vec<f64> = ranges.iter().map(|r| r[k].lo).collect();
                    let hi: Vec<f64> = ranges.iter().map(|r| r[k].hi).collect();
                    bounds_ci(&lo, &hi, alpha / 2.0)
                };
                combine_ate(side(0)?, side(1)?)
            }
            _ => {
                let composed: Vec<Interval> = ranges
                    .iter()
                    .zip(&self.replicates)
                    .map(|(r, rep)| self.compose(r, rep.treated_mean))
                    .collect();
                let lo: Vec<f64> = composed.iter().map(|i| i.lo).collect();
                let hi: Vec<f64> = composed.iter().map(|i| i.hi).collect();
                bounds_ci(&lo, &hi, alpha)?
            }
        };
        Ok(SensitivityResult {
            estimand: self.estimand,
            lambda,
            alpha,
            point_estimate: self.point_estimate,
            estimate_range: estimate_range(&self.data, &self.original, lambda)?,
            ci,
            b_reps: self.b_reps,
            b_used: self.replicates.len(),
            dropped: self.dropped,
            redraws: self.redraws,
            unbounded_replicates,
        })
    }

    /// Smallest Λ whose interval reaches the target (0, or ±ι in
    /// equivalence mode), by bisection with the shared replicates.
    pub fn lambda_star(&self, alpha: f64, search: &LambdaSearch) -> Result<LambdaStar> {
        search.check()?;
        let hits = |ci: &Interval| {
            if search.iota > 0.0 {
                ci.contains(-search.iota) || ci.contains(search.iota)
            } else {
                ci.contains(0.0)
            }
        };
        let mut evaluations = Vec::new();
        let mut eval = |lambda: f64| -> Result<SensitivityResult> {
            let r = self.interval(lambda, alpha)?;
            evaluations.push(LambdaEval { lambda, ci: r.ci });
            Ok(r)
        };
        let at_one = eval(1.0)?;
        if hits(&at_one.ci) {
            return Ok(LambdaStar {
                lambda_star: 1.0,
                not_significant: true,
                iota: search.iota,
                ci: at_one.ci,
                estimate_range: at_one.estimate_range,
                evaluations,
            });
        }
        let at_max = eval(search.lambda_max)?;
        if !hits(&at_max.ci) {
            return Err(Error::NotBracketed { lambda_max: search.lambda_max });
        }
        let (mut lo, mut hi, mut best) = (1.0, search.lambda_max, at_max);
        while hi - lo > search.tol {
            let mid = 0.5 * (lo + hi);
            let r = eval(mid)?;
            if hits(&r.ci) {
                hi = mid;
                best = r;
            } else {
                lo = mid;
            }
        }
        Ok(LambdaStar {
            lambda_star: hi,
            not_significant: false,
            iota: search.iota,
            ci: best.ci,
            estimate_range: best.estimate_range,
            evaluations,
        })
    }
}

/// Λ* search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    /// Minimal effect size; 0 searches for the interval reaching zero.
    pub iota: f64,
    pub lambda_max: f64,
    /// Absolute bisection tolerance on Λ.
    pub tol: f64,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        LambdaSearch { iota: 0.0, lambda_max: 50.0, tol: 0.01 }
    }
}

impl LambdaSearch {
    fn check(&self) -> Result<()> {
        if !(self.lambda_max > 1.0) || !self.lambda_max.is_finite() {
            return Err(Error::Domain(format!("Λ_max must exceed 1, got {}", self.lambda_max)));
        }
        if !(self.tol > 0.0) || !(self.iota >= 0.0) {
            return Err(Error::Domain("search tolerance must be positive and ι nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEval {
    pub lambda: f64,
    pub ci: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStar {
    pub lambda_star: f64,
    /// The Λ = 1 interval already reaches the target.
    pub not_significant: bool,
    pub iota: f64,
    /// Interval at the returned Λ*.
    pub ci: Interval,
    pub estimate_range: Interval,
    pub evaluations: Vec<LambdaEval>,
}

/// Fits replicates and evaluates the interval at `sens.lambda_sens`.
pub fn sensitivity_interval(
    data: &Dataset,
    spec: &BalanceSpec,
    sens: &SensConfig,
    plan: &BootstrapPlan,
    estimand: Estimand,
) -> Result<SensitivityResult> {
    sens.check()?;
    BootstrapAnalysis::prepare(data, spec, plan, estimand)?.interval(sens.lambda_sens, sens.alpha)
}

/// Λ* with the minimal effect size from `sens.iota`.
pub fn lambda_star(
    data: &Dataset,
    spec: &BalanceSpec,
    sens: &SensConfig,
    plan: &BootstrapPlan,
    estimand: Estimand,
    lambda_max: f64,
) -> Result<LambdaStar> {
    sens.check()?;
    let search = LambdaSearch { iota: sens.iota, lambda_max, ..Default::default() };
    BootstrapAnalysis::prepare(data, spec, plan, estimand)?.lambda_star(sens.alpha, &search)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(percentile_ci(&v, 0.05).unwrap(), Interval { lo: 25.0, hi: 975.0 });
        assert_eq!(percentile_ci(&[0.0, 1.0], 0.5).unwrap(), Interval { lo: 0.0, hi: 1.0 });
        assert_eq!(percentile_ci(&[3.0; 7], 0.1).unwrap(), Interval { lo: 3.0, hi: 3.0 });
        assert_eq!(percentile_ci(&[], 0.1).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn single_row_cannot_be_resampled() {
        let mut rng = replicate_rng(1, 0);
        let err = resample_indices(&[true], &mut rng, 5).unwrap_err();
        assert_eq!(err, Error::DegenerateResampling { redraws: 5 });
    }

    #[test]
    fn streams_are_reproducible() {
        let z: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let a = resample_indices(&z, &mut replicate_rng(42, 7), 10).unwrap();
        let b = resample_indices(&z, &mut replicate_rng(42, 7), 10).unwrap();
        let c = resample_indices(&z, &mut replicate_rng(42, 8), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn plan_needs_two_reps() {
        assert!(BootstrapPlan::new(1, 0).is_err());
        assert!(BootstrapPlan::new(2, 0).is_ok());
    }
}
