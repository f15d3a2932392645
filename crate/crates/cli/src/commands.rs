use std::path::{Path, PathBuf};

use balsens::amplification::{amplified_mean, amplify as amplify_fit, Verdict};
use balsens::balancer::Transform;
use balsens::data::Scaling;
use balsens::simulate::{coverage_experiment, split_compare, CoverageSpec, DgpSpec, DistSummary, LambdaCoverage};
use balsens::{
    balance_table, fit_estimand, point_estimate, standardize, BalanceMethod, BootstrapAnalysis, BootstrapPlan, Dataset,
    Estimand, Interval, LambdaSearch, LambdaStar, SensitivityResult,
};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, num, read_dataset, write_csv, write_json};

fn load(cfg: &RunConfig) -> CliResult<Dataset> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::Config("--input is required".into()))?;
    read_dataset(path)
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn method_name(m: BalanceMethod) -> &'static str {
    match m {
        BalanceMethod::Sbw => "sbw",
        BalanceMethod::Entropy => "entropy",
    }
}

fn transform_name(t: Transform) -> &'static str {
    match t {
        Transform::Linear => "linear",
        Transform::Quadratic => "quadratic",
    }
}

#[derive(Serialize)]
struct Settings<'a> {
    estimand: Estimand,
    method: &'static str,
    transform: &'static str,
    tol: f64,
    alpha: f64,
    b_reps: usize,
    seed: u64,
    input: Option<&'a Path>,
}

fn settings(cfg: &RunConfig) -> Settings<'_> {
    Settings {
        estimand: cfg.estimand,
        method: method_name(cfg.balance.method),
        transform: transform_name(cfg.balance.transform),
        tol: cfg.balance.tol,
        alpha: cfg.alpha,
        b_reps: cfg.b_reps,
        seed: cfg.seed,
        input: cfg.input.as_deref(),
    }
}

#[derive(Serialize)]
struct FitSummary<'a> {
    mean: &'static str,
    feature_names: &'a [String],
    beta: &'a [f64],
    imbalance: &'a [f64],
    objective: f64,
    iterations: usize,
    residual: f64,
    sum_weights: f64,
    warnings: &'a [String],
}

/// Weights, dual coefficients and the balance table.
pub fn balance(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let raw = load(cfg)?;
    let (data, scaling) = standardize(&raw);
    let fit = fit_estimand(&data, &cfg.balance, cfg.estimand)?;
    let estimate = point_estimate(&data, &fit)?;
    ensure_dir(&cfg.out_dir)?;

    let mut weights = Vec::new();
    let mut table = Vec::new();
    for f in &fit.fits {
        for (&row, g) in f.rows.iter().zip(&f.gamma) {
            weights.push(vec![row.to_string(), f.kind.name().to_string(), num(*g)]);
        }
        for r in balance_table(&data, f)? {
            table.push(vec![f.kind.name().to_string(), r.feature, num(r.delta_pre), num(r.delta_post)]);
        }
    }
    write_csv(&out(cfg, "weights.csv"), &["row_id", "mean", "gamma"], &weights)?;
    write_csv(&out(cfg, "balance_table.csv"), &["mean", "name", "delta_pre", "delta_post"], &table)?;

    let fits: Vec<FitSummary> = fit
        .fits
        .iter()
        .map(|f| FitSummary {
            mean: f.kind.name(),
            feature_names: &f.feature_names,
            beta: &f.beta,
            imbalance: &f.imbalance,
            objective: f.objective,
            iterations: f.iterations,
            residual: f.residual,
            sum_weights: f.gamma.iter().sum(),
            warnings: &f.warnings,
        })
        .collect();
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        settings: Settings<'a>,
        n: usize,
        n_treated: usize,
        n_control: usize,
        point_estimate: f64,
        standardization: &'a Scaling,
        covariates: &'a [String],
        fits: Vec<FitSummary<'a>>,
    }
    let report = Report {
        settings: settings(cfg),
        n: data.n(),
        n_treated: data.n1(),
        n_control: data.n0(),
        point_estimate: estimate,
        standardization: &scaling,
        covariates: raw.names(),
        fits,
    };
    write_json(&out(cfg, "fit.json"), &report)?;
    Ok(json!({ "command": "balance", "estimand": cfg.estimand, "point_estimate": estimate }))
}

fn prepare(cfg: &RunConfig) -> CliResult<BootstrapAnalysis> {
    let raw = load(cfg)?;
    let plan = BootstrapPlan::new(cfg.b_reps, cfg.seed)?;
    Ok(BootstrapAnalysis::prepare(&raw, &cfg.balance, &plan, cfg.estimand)?)
}

/// Estimate ranges and intervals over the Λ grid.
pub fn sensitivity(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let analysis = prepare(cfg)?;
    let results = cfg
        .lambdas
        .iter()
        .map(|&l| analysis.interval(l, cfg.alpha))
        .collect::<balsens::Result<Vec<SensitivityResult>>>()?;
    ensure_dir(&cfg.out_dir)?;
    let wide: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![num(r.lambda), num(r.estimate_range.lo), num(r.estimate_range.hi), num(r.ci.lo), num(r.ci.hi)]
        })
        .collect();
    write_csv(&out(cfg, "intervals.csv"), &["lambda", "est_lo", "est_hi", "ci_lo", "ci_hi"], &wide)?;
    let mut long = Vec::new();
    for r in &results {
        for (kind, v) in [
            ("est_lo", r.estimate_range.lo),
            ("est_hi", r.estimate_range.hi),
            ("ci_lo", r.ci.lo),
            ("ci_hi", r.ci.hi),
        ] {
            long.push(vec![num(r.lambda), kind.to_string(), num(v)]);
        }
    }
    write_csv(&out(cfg, "bounds_long.csv"), &["lambda", "bound_type", "value"], &long)?;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        settings: Settings<'a>,
        point_estimate: f64,
        results: &'a [SensitivityResult],
    }
    write_json(
        &out(cfg, "results.json"),
        &Report { settings: settings(cfg), point_estimate: analysis.point_estimate(), results: &results },
    )?;
    Ok(json!({
        "command": "sensitivity",
        "estimand": cfg.estimand,
        "point_estimate": analysis.point_estimate(),
        "lambdas": cfg.lambdas,
    }))
}

fn search_lambda_star(cfg: &RunConfig, analysis: &BootstrapAnalysis) -> CliResult<LambdaStar> {
    let search = LambdaSearch { iota: cfg.iota, lambda_max: cfg.lambda_max, ..Default::default() };
    Ok(analysis.lambda_star(cfg.alpha, &search)?)
}

/// Λ* by bisection.
pub fn lambda_star(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let analysis = prepare(cfg)?;
    let star = search_lambda_star(cfg, &analysis)?;
    ensure_dir(&cfg.out_dir)?;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        settings: Settings<'a>,
        point_estimate: f64,
        lambda_max: f64,
        #[serde(flatten)]
        star: &'a LambdaStar,
    }
    write_json(
        &out(cfg, "lambda_star.json"),
        &Report { settings: settings(cfg), point_estimate: analysis.point_estimate(), lambda_max: cfg.lambda_max, star: &star },
    )?;
    Ok(json!({
        "command": "lambda-star",
        "lambda_star": star.lambda_star,
        "not_significant": star.not_significant,
    }))
}

/// Error bound, contour, benchmarks and verdict at a supplied Λ or at Λ*.
pub fn amplify(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    amplified_mean(cfg.estimand)?;
    let (lambda, source) = match cfg.lambda {
        Some(l) => (l, "supplied"),
        None => {
            let analysis = prepare(cfg)?;
            (search_lambda_star(cfg, &analysis)?.lambda_star, "lambda_star")
        }
    };
    let raw = load(cfg)?;
    let (data, scaling) = standardize(&raw);
    let fit = fit_estimand(&data, &cfg.balance, cfg.estimand)?;
    let res = amplify_fit(&data, &fit, Some(&scaling), lambda, cfg.contour_points)?;
    ensure_dir(&cfg.out_dir)?;

    let pairs = |pts: &[(f64, f64)]| -> Vec<Vec<String>> { pts.iter().map(|(d, b)| vec![num(*d), num(*b)]).collect() };
    write_csv(&out(cfg, "contour.csv"), &["delta", "beta"], &pairs(&res.curve.points))?;
    write_csv(&out(cfg, "hull.csv"), &["delta", "beta"], &pairs(&res.hull))?;
    let bench: Vec<Vec<String>> = res
        .benchmarks
        .iter()
        .map(|b| {
            vec![
                b.name.clone(),
                num(b.delta_pre),
                num(b.delta_post),
                num(b.beta_hat),
                num(b.delta_pre_signed),
                num(b.delta_post_signed),
                num(b.beta_hat_signed),
                num(b.beta_se),
            ]
        })
        .collect();
    write_csv(
        &out(cfg, "benchmarks.csv"),
        &[
            "name",
            "delta_pre",
            "delta_post",
            "beta_hat",
            "delta_pre_signed",
            "delta_post_signed",
            "beta_hat_signed",
            "beta_se",
        ],
        &bench,
    )?;
    let mut flags = Vec::new();
    if res.curve.no_confounding_needed {
        flags.push("NO_CONFOUNDING_NEEDED");
    }
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        settings: Settings<'a>,
        mean: &'static str,
        lambda: f64,
        lambda_source: &'static str,
        error_bounds: Interval,
        error_bound: f64,
        verdict: Option<Verdict>,
        flags: &'a [&'static str],
        skipped: &'a [(String, String)],
    }
    write_json(
        &out(cfg, "verdict.json"),
        &Report {
            settings: settings(cfg),
            mean: res.mean.name(),
            lambda,
            lambda_source: source,
            error_bounds: res.error_bounds,
            error_bound: res.error_bound,
            verdict: res.verdict,
            flags: &flags,
            skipped: &res.skipped,
        },
    )?;
    Ok(json!({
        "command": "amplify",
        "lambda": lambda,
        "error_bound": res.error_bound,
        "verdict": res.verdict,
        "flags": flags,
    }))
}

/// Coverage experiment over the Λ grid plus the sample-splitting comparison.
pub fn simulate(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let dgp = DgpSpec::new(cfg.n, cfg.seed)?;
    let cov = CoverageSpec {
        n_sims: cfg.n_sims,
        lambdas: cfg.lambdas.clone(),
        alpha: cfg.alpha,
        estimand: cfg.estimand,
        balance: cfg.balance,
        b_reps: cfg.b_reps,
    };
    let report = coverage_experiment(&dgp, &cov)?;
    let split = split_compare(&dgp, &cfg.balance, &BootstrapPlan::new(cfg.b_reps, cfg.seed)?)?;
    ensure_dir(&cfg.out_dir)?;

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.sim_id.to_string(),
                num(r.lambda),
                num(r.estimate),
                num(r.ci_lo),
                num(r.ci_hi),
                r.covered.to_string(),
            ]
        })
        .collect();
    write_csv(&out(cfg, "coverage.csv"), &["sim_id", "lambda", "estimate", "ci_lo", "ci_hi", "covered"], &rows)?;
    let mut draws = Vec::new();
    for (procedure, values) in [("full", &split.full_draws), ("split", &split.split_draws)] {
        for (b, v) in values.iter().enumerate() {
            draws.push(vec![b.to_string(), procedure.to_string(), num(*v)]);
        }
    }
    write_csv(&out(cfg, "split_compare.csv"), &["replicate", "procedure", "estimate"], &draws)?;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        settings: Settings<'a>,
        dgp: &'a DgpSpec,
        n_sims: usize,
        truth: f64,
        reps: usize,
        failed: usize,
        coverage: &'a [LambdaCoverage],
        split_full: &'a DistSummary,
        split_split: &'a DistSummary,
        split_dropped: usize,
    }
    write_json(
        &out(cfg, "simulate_summary.json"),
        &Report {
            settings: settings(cfg),
            dgp: &dgp,
            n_sims: cfg.n_sims,
            truth: report.truth,
            reps: report.reps,
            failed: report.failed,
            coverage: &report.per_lambda,
            split_full: &split.full,
            split_split: &split.split,
            split_dropped: split.split_dropped,
        },
    )?;
    Ok(json!({
        "command": "simulate",
        "coverage": report.per_lambda,
        "split_mean": [split.full.mean, split.split.mean],
        "split_sd": [split.full.sd, split.split.sd],
    }))
}
