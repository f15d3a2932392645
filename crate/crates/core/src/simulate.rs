//! Simulation harness: a two-covariate data-generating process with a known
//! control mean, bootstrap coverage experiments and the sample-splitting
//! comparison.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancer::{fit_weights, hajek, BalanceSpec, WeightFit};
use crate::bootstrap::{quantile_nearest_rank, replicate_rng, resample_indices, BootstrapAnalysis, BootstrapPlan};
use crate::data::{standardize, Dataset, Estimand, Group, MeanKind};
use crate::error::{Error, Result};

/// Linear-probability treatment and linear outcome in two standard normal
/// covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub intercept: f64,
    pub slopes: [f64; 2],
    pub treatment_noise_sd: f64,
    pub effect: f64,
    pub outcome_slopes: [f64; 2],
    pub outcome_noise_sd: f64,
    pub seed: u64,
}

/// Treatment probabilities are clamped into this band to keep overlap.
pub const PROBABILITY_BAND: (f64, f64) = (0.01, 0.99);

impl DgpSpec {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        let spec = DgpSpec {
            n,
            intercept: 0.5,
            slopes: [0.07, 0.07],
            treatment_noise_sd: 0.03,
            effect: 0.2,
            outcome_slopes: [0.5, 0.5],
            outcome_noise_sd: 0.2,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Domain(format!("simulation needs n ≥ 10, got {}", self.n)));
        }
        if !(self.treatment_noise_sd >= 0.0 && self.outcome_noise_sd >= 0.0) {
            return Err(Error::Domain("noise standard deviations must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Population value of an estimand under this process. The covariates
    /// are centred, so the control mean is 0 and every effect is `effect`.
    pub fn truth(&self, estimand: Estimand) -> Result<f64> {
        match estimand {
            Estimand::Mu0 => Ok(0.0),
            Estimand::Mu1 | Estimand::Ate | Estimand::Att => Ok(self.effect),
            Estimand::Mu01 => Err(Error::UnsupportedEstimand(
                "mu01 has no closed form under the simulation process".into(),
            )),
        }
    }
}

/// One draw with both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub data: Dataset,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Clamped treatment probabilities.
    pub propensity: Vec<f64>,
}

/// Draws a sample together with its potential outcomes.
pub fn generate_draw<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<Draw> {
    spec.check()?;
    let n = spec.n;
    let treat_noise = Normal::new(0.0, spec.treatment_noise_sd).map_err(|e| Error::Domain(e.to_string()))?;
    let out_noise = Normal::new(0.0, spec.outcome_noise_sd).map_err(|e| Error::Domain(e.to_string()))?;
    let mut x = DMatrix::zeros(n, 2);
    let (mut y, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut y0, mut y1) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut propensity = Vec::with_capacity(n);
    for i in 0..n {
        let x1: f64 = StandardNormal.sample(rng);
        let x2: f64 = StandardNormal.sample(rng);
        let p = (spec.intercept + spec.slopes[0] * x1 + spec.slopes[1] * x2 + treat_noise.sample(rng))
            .clamp(PROBABILITY_BAND.0, PROBABILITY_BAND.1);
        let zi = rng.random::<f64>() < p;
        let base = spec.outcome_slopes[0] * x1 + spec.outcome_slopes[1] * x2 + out_noise.sample(rng);
        x[(i, 0)] = x1;
        x[(i, 1)] = x2;
        propensity.push(p);
        y0.push(base);
        y1.push(base + spec.effect);
        y.push(if zi { base + spec.effect } else { base });
        z.push(if zi { 1.0 } else { 0.0 });
    }
    let data = Dataset::new(y, z, x, vec!["x1".into(), "x2".into()])?;
    Ok(Draw { data, y0, y1, propensity })
}

pub fn generate<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<Dataset> {
    generate_draw(spec, rng).map(|d| d.data)
}

/// Interval for one simulation at one Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub sim_id: usize,
    pub lambda: f64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCoverage {
    pub lambda: f64,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub estimand: Estimand,
    pub truth: f64,
    /// Simulations that produced an interval.
    pub reps: usize,
    /// Simulations lost to solver failures.
    pub failed: usize,
    pub per_lambda: Vec<LambdaCoverage>,
    pub records: Vec<SimRecord>,
}

impl CoverageReport {
    pub fn coverage_at(&self, lambda: f64) -> Option<f64> {
        self.per_lambda.iter().find(|c| c.lambda == lambda).map(|c| c.coverage)
    }
}

/// Settings for [`coverage_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSpec {
    pub n_sims: usize,
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub estimand: Estimand,
    pub balance: BalanceSpec,
    pub b_reps: usize,
}

impl CoverageSpec {
    pub fn new(n_sims: usize, b_reps: usize) -> Self {
        CoverageSpec {
            n_sims,
            lambdas: vec![1.0],
            alpha: 0.05,
            estimand: Estimand::Mu0,
            balance: BalanceSpec::entropy(),
            b_reps,
        }
    }
}

/// Repeats draw → bootstrap → interval. Simulation `s` draws its data and its
/// bootstrap seed from stream `s` of the process seed, so results do not
/// depend on scheduling.
pub fn coverage_experiment(dgp: &DgpSpec, cov: &CoverageSpec) -> Result<CoverageReport> {
    if cov.n_sims == 0 {
        return Err(Error::Domain("n_sims must be at least 1".into()));
    }
    if cov.lambdas.is_empty() {
        return Err(Error::Domain("at least one Λ is required".into()));
    }
    let truth = dgp.truth(cov.estimand)?;
    let outcomes: Vec<Result<Option<Vec<SimRecord>>>> = (0..cov.n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = replicate_rng(dgp.seed, s as u64);
            let data = generate(dgp, &mut rng)?;
            let plan = BootstrapPlan::new(cov.b_reps, rng.next_u64())?;
            let analysis = match BootstrapAnalysis::prepare(&data, &cov.balance, &plan, cov.estimand) {
                Ok(a) => a,
                Err(e) if e.is_solver_error() => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut records = Vec::with_capacity(cov.lambdas.len());
            for &lambda in &cov.lambdas {
                let res = analysis.interval(lambda, cov.alpha)?;
                records.push(SimRecord {
                    sim_id: s,
                    lambda,
                    estimate: res.point_estimate,
                    ci_lo: res.ci.lo,
                    ci_hi: res.ci.hi,
                    covered: res.ci.contains(truth),
                });
            }
            Ok(Some(records))
        })
        .collect();
    let mut records = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o? {
            Some(r) => records.extend(r),
            None => failed += 1,
        }
    }
    let reps = cov.n_sims - failed;
    let per_lambda = cov
        .lambdas
        .iter()
        .map(|&lambda| {
            let at: Vec<&SimRecord> = records.iter().filter(|r| r.lambda == lambda).collect();
            let count = at.len().max(1) as f64;
            LambdaCoverage {
                lambda,
                coverage: at.iter().filter(|r| r.covered).count() as f64 / count,
                mean_width: at.iter().map(|r| r.ci_hi - r.ci_lo).sum::<f64>() / count,
            }
        })
        .collect();
    Ok(CoverageReport { estimand: cov.estimand, truth, reps, failed, per_lambda, records })
}

/// Mean, sample sd and deciles (10% … 90%) of a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub deciles: Vec<f64>,
}

impl DistSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::EmptyInput);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let deciles = (1..10).map(|k| quantile_nearest_rank(&sorted, k as f64 / 10.0)).collect();
        Ok(DistSummary { count: values.len(), mean, sd, deciles })
    }
}

/// Full-data and split-sample bootstrap distributions of μ̂0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n: usize,
    pub b_reps: usize,
    pub full: DistSummary,
    pub split: DistSummary,
    pub full_draws: Vec<f64>,
    pub split_draws: Vec<f64>,
    /// Split replicates lost to solver failures.
    pub split_dropped: usize,
}

/// Hájek estimate on `eval` using the weight function fitted on another
/// sample.
fn cross_estimate(fit: &WeightFit, eval: &Dataset) -> Result<f64> {
    let rows = eval.rows_in(fit.kind.group());
    let x = eval.x();
    let mut xrow = vec![0.0; eval.d()];
    let mut phi = Vec::new();
    let mut gamma = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for &i in &rows {
        for (j, slot) in xrow.iter_mut().enumerate() {
            *slot = x[(i, j)];
        }
        fit.transform.apply_into(&xrow, &mut phi);
        gamma.push(fit.weight_at(&phi));
        y.push(eval.y()[i]);
    }
    hajek(&y, &gamma)
}

/// Compares the bootstrap distribution of μ̂0 on one draw with the
/// split-sample version: halve the data, resample each half, fit the weight
/// function on one resampled half and evaluate it on the other, swap roles,
/// and average the two estimates in proportion to the evaluated halves'
/// control counts.
pub fn split_compare(dgp: &DgpSpec, balance: &BalanceSpec, plan: &BootstrapPlan) -> Result<SplitReport> {
    if dgp.n % 2 != 0 {
        return Err(Error::OddN(dgp.n));
    }
    let mut rng = replicate_rng(dgp.seed, 0);
    let raw = generate(dgp, &mut rng)?;
    let full = BootstrapAnalysis::prepare(&raw, balance, plan, Estimand::Mu0)?;
    let full_draws = full.replicate_estimates()?;

    // the draw is i.i.d., so a contiguous split is a random split
    let (data, _) = standardize(&raw);
    let half = dgp.n / 2;
    let first: Vec<usize> = (0..half).collect();
    let second: Vec<usize> = (half..dgp.n).collect();
    let halves = [data.subset(&first)?, data.subset(&second)?];
    // a separate stream family from the full-data bootstrap
    let split_seed = plan.seed ^ 0x5EED_5EED_5EED_5EED;
    let kind = MeanKind::Mu0;
    let outcomes: Vec<Result<Option<f64>>> = (0..plan.b_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(split_seed, b as u64);
            let mut boot = Vec::with_capacity(2);
            for h in &halves {
                let (idx, _) = resample_indices(h.z(), &mut rng, plan.max_redraws)?;
                boot.push(h.subset(&idx)?);
            }
            let mut fits = Vec::with_capacity(2);
            for sample in &boot {
                match fit_weights(sample, balance, kind) {
                    Ok(f) => fits.push(f),
                    Err(e) if e.is_solver_error() => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            let est_second = cross_estimate(&fits[0], &boot[1])?;
            let est_first = cross_estimate(&fits[1], &boot[0])?;
            let (c_first, c_second) = (boot[0].group_size(Group::Control) as f64, boot[1].group_size(Group::Control) as f64);
            Ok(Some((c_first * est_first + c_second * est_second) / (c_first + c_second)))
        })
        .collect();
    let mut split_draws = Vec::with_capacity(plan.b_reps);
    let mut split_dropped = 0;
    for o in outcomes {
        match o? {
            Some(v) => split_draws.push(v),
            None => split_dropped += 1,
        }
    }
    if split_dropped as f64 > plan.max_drop_fraction * plan.b_reps as f64 {
        return Err(Error::TooManyDropped { dropped: split_dropped, total: plan.b_reps });
    }
    Ok(SplitReport {
        n: dgp.n,
        b_reps: plan.b_reps,
        full: DistSummary::of(&full_draws)?,
        split: DistSummary::of(&split_draws)?,
        full_draws,
        split_draws,
        split_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ols;

    #[test]
    fn same_seed_same_draw() {
        let spec = DgpSpec::new(50, 9).unwrap();
        let a = generate(&spec, &mut replicate_rng(9, 0)).unwrap();
        let b = generate(&spec, &mut replicate_rng(9, 0)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, &mut replicate_rng(9, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_tiny_n() {
        assert_eq!(DgpSpec::new(9, 0).unwrap_err().code(), "DOMAIN");
    }

    #[test]
    fn treated_fraction_near_half() {
        let spec = DgpSpec::new(10_000, 1).unwrap();
        let d = generate(&spec, &mut replicate_rng(1, 0)).unwrap();
        let frac = d.n1() as f64 / d.n() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn regression_recovers_coefficients() {
        let spec = DgpSpec::new(20_000, 4).unwrap();
        let d = generate(&spec, &mut replicate_rng(4, 0)).unwrap();
        let x = d.x();
        let design = DMatrix::from_fn(d.n(), 4, |i, j| match j {
            0 => 1.0,
            1 => f64::from(u8::from(d.z()[i])),
            _ => x[(i, j - 2)],
        });
        let fit = ols(&design, d.y()).unwrap();
        for (k, truth) in [(1, 0.2), (2, 0.5), (3, 0.5)] {
            assert!((fit.coef[k] - truth).abs() <= 3.0 * fit.se[k], "coef {k}: {} ± {}", fit.coef[k], fit.se[k]);
        }
    }

    #[test]
    fn potentials_are_consistent() {
        let spec = DgpSpec::new(40, 2).unwrap();
        let draw = generate_draw(&spec, &mut replicate_rng(2, 0)).unwrap();
        for i in 0..40 {
            let observed = if draw.data.z()[i] { draw.y1[i] } else { draw.y0[i] };
            assert_eq!(draw.data.y()[i], observed);
            assert!((draw.y1[i] - draw.y0[i] - 0.2).abs() < 1e-12);
            assert!(draw.propensity[i] >= 0.01 && draw.propensity[i] <= 0.99);
        }
    }

    #[test]
    fn single_simulation_coverage_is_zero_or_one() {
        let dgp = DgpSpec::new(200, 3).unwrap();
        let mut cov = CoverageSpec::new(1, 50);
        cov.lambdas = vec![1.0, 2.0];
        let report = coverage_experiment(&dgp, &cov).unwrap();
        let c1 = report.coverage_at(1.0).unwrap();
        assert!(c1 == 0.0 || c1 == 1.0);
        assert!(report.coverage_at(2.0).unwrap() >= c1);
    }

    #[test]
    fn split_compare_smoke() {
        let dgp = DgpSpec::new(100, 5).unwrap();
        let plan = BootstrapPlan::new(40, 11).unwrap();
        let report = split_compare(&dgp, &BalanceSpec::entropy(), &plan).unwrap();
        assert_eq!(report.full_draws.len() + report.split_draws.len() + report.split_dropped, 80);
        assert_eq!(report.full.deciles.len(), 9);
        let odd = DgpSpec { n: 101, ..dgp };
        assert_eq!(split_compare(&odd, &BalanceSpec::entropy(), &plan).unwrap_err(), Error::OddN(101));
    }

    #[test]
    fn mu01_truth_is_unsupported() {
        let dgp = DgpSpec::new(20, 0).unwrap();
        assert_eq!(dgp.truth(Estimand::Mu01).unwrap_err().code(), "UNSUPPORTED_ESTIMAND");
    }
}
