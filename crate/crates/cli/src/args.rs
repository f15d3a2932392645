use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "balsens", version, about = "Balancing weights with bootstrap sensitivity analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit balancing weights and report covariate balance.
    Balance(Flags),
    /// Estimate ranges and percentile-bootstrap intervals over a Λ grid.
    Sensitivity(Flags),
    /// Smallest Λ whose interval reaches zero (or ±ι).
    LambdaStar(Flags),
    /// Error bound at Λ*, contour and benchmark data.
    Amplify(Flags),
    /// Coverage and sample-splitting experiments on synthetic data.
    Simulate(Flags),
}

/// Flags shared by every command. Unset flags fall back to the config file,
/// then to built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// CSV with columns `y`, `z` and numeric covariates.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON config file; flags take precedence over its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// att, ate, mu1, mu0 (or mu01).
    #[arg(long)]
    pub estimand: Option<String>,
    /// Single sensitivity parameter Λ ≥ 1.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated ascending Λ values, e.g. `1,1.5,2`.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Bootstrap replicates.
    #[arg(long)]
    pub b_reps: Option<usize>,
    /// Random seed; falls back to BALSENS_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// SBW imbalance tolerance in standardized units.
    #[arg(long)]
    pub tol: Option<f64>,
    /// sbw or entropy.
    #[arg(long)]
    pub method: Option<String>,
    /// Minimal effect size for equivalence-mode Λ*.
    #[arg(long)]
    pub iota: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for bootstrap and simulation.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Upper end of the Λ* search.
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// linear or quadratic feature map.
    #[arg(long)]
    pub transform: Option<String>,
    /// Points on the amplification contour.
    #[arg(long)]
    pub contour_points: Option<usize>,
    /// Simulated sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of simulated datasets.
    #[arg(long)]
    pub n_sims: Option<usize>,
}
