use std::path::{Path, PathBuf};

use balsens::balancer::Transform;
use balsens::{BalanceMethod, BalanceSpec, Estimand};
use serde::Deserialize;

use crate::args::Flags;
use crate::error::{CliError, CliResult};

/// Entries accepted in a `--config` JSON file. Keys mirror the flag names
/// with underscores.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub estimand: Option<String>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub b_reps: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub method: Option<String>,
    pub iota: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub lambda_max: Option<f64>,
    pub transform: Option<String>,
    pub contour_points: Option<usize>,
    pub n: Option<usize>,
    pub n_sims: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Balance,
    Sensitivity,
    LambdaStar,
    Amplify,
    Simulate,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub estimand: Estimand,
    pub balance: BalanceSpec,
    /// Explicit single Λ, if any.
    pub lambda: Option<f64>,
    /// Ascending grid, starting at or above 1.
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub b_reps: usize,
    pub seed: u64,
    pub iota: f64,
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub lambda_max: f64,
    pub contour_points: usize,
    pub n: usize,
    pub n_sims: usize,
}

impl RunConfig {
    /// Flags, then config file, then `env_seed` (seed only), then defaults.
    pub fn resolve(kind: CommandKind, flags: &Flags, env_seed: Option<&str>) -> CliResult<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let simulate = kind == CommandKind::Simulate;

        let estimand_name = pick(flags.estimand.clone(), file.estimand).unwrap_or_else(|| {
            if simulate { "mu0" } else { "att" }.to_string()
        });
        let estimand: Estimand = estimand_name.parse().map_err(|e: balsens::Error| CliError::Config(e.to_string()))?;

        let method = match pick(flags.method.clone(), file.method).as_deref() {
            None if simulate => BalanceMethod::Entropy,
            None => BalanceMethod::Sbw,
            Some(m) => match m.to_ascii_lowercase().as_str() {
                "sbw" => BalanceMethod::Sbw,
                "entropy" => BalanceMethod::Entropy,
                other => return Err(CliError::Config(format!("unknown method `{other}` (sbw or entropy)"))),
            },
        };
        let transform = match pick(flags.transform.clone(), file.transform).as_deref() {
            None => Transform::Linear,
            Some(t) => match t.to_ascii_lowercase().as_str() {
                "linear" => Transform::Linear,
                "quadratic" => Transform::Quadratic,
                other => return Err(CliError::Config(format!("unknown transform `{other}` (linear or quadratic)"))),
            },
        };
        let tol = pick(flags.tol, file.tol).unwrap_or(BalanceSpec::default().tol);
        if !(tol >= 0.0) || !tol.is_finite() {
            return Err(CliError::Config(format!("tol must be finite and ≥ 0, got {tol}")));
        }
        let balance = match method {
            BalanceMethod::Sbw => BalanceSpec { transform, ..BalanceSpec::sbw(tol) },
            BalanceMethod::Entropy => BalanceSpec { transform, ..BalanceSpec::entropy() },
        };

        let lambda = pick(flags.lambda, file.lambda);
        let lambdas = match pick(flags.lambda_grid.clone(), file.lambda_grid) {
            Some(grid) => grid,
            None => vec![lambda.unwrap_or(1.0)],
        };
        check_grid(&lambdas)?;
        if let Some(l) = lambda {
            check_grid(&[l])?;
        }

        let alpha = pick(flags.alpha, file.alpha).unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let b_reps = pick(flags.b_reps, file.b_reps).unwrap_or(if simulate { 500 } else { 1000 });
        if b_reps < 2 {
            return Err(CliError::Config(format!("b_reps must be at least 2, got {b_reps}")));
        }
        let seed = match pick(flags.seed, file.seed) {
            Some(s) => s,
            None => match env_seed {
                Some(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("BALSENS_SEED must be an unsigned integer, got `{s}`")))?,
                None => 0,
            },
        };
        let iota = pick(flags.iota, file.iota).unwrap_or(0.0);
        if !(iota >= 0.0) || !iota.is_finite() {
            return Err(CliError::Config(format!("iota must be finite and ≥ 0, got {iota}")));
        }
        let lambda_max = pick(flags.lambda_max, file.lambda_max).unwrap_or(50.0);
        let workers = pick(flags.workers, file.workers);
        if workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let contour_points = pick(flags.contour_points, file.contour_points).unwrap_or(200);
        let input = pick(flags.input.clone(), file.input);
        if !simulate && input.is_none() {
            return Err(CliError::Config("--input is required".into()));
        }
        Ok(RunConfig {
            input,
            estimand,
            balance,
            lambda,
            lambdas,
            alpha,
            b_reps,
            seed,
            iota,
            out_dir: pick(flags.out_dir.clone(), file.out_dir).unwrap_or_else(|| PathBuf::from(".")),
            workers,
            lambda_max,
            contour_points,
            n: pick(flags.n, file.n).unwrap_or(2000),
            n_sims: pick(flags.n_sims, file.n_sims).unwrap_or(300),
        })
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn check_grid(grid: &[f64]) -> CliResult<()> {
    if grid.is_empty() {
        return Err(CliError::Config("Λ grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 1.0) || !l.is_finite()) {
        return Err(CliError::Config(format!("every Λ must be finite and ≥ 1, got {grid:?}")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CliError::Config(format!("Λ grid must be strictly ascending, got {grid:?}")));
    }
    Ok(())
}
