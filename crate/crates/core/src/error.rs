use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. `code()` gives the stable
/// machine-readable identifier used in CLI error output.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("both treatment groups must be nonempty (n1 = {n1}, n0 = {n0})")]
    EmptyGroup { n1: usize, n0: usize },

    #[error("non-finite value in `{field}` at row {row}")]
    NonFinite { field: String, row: usize },

    #[error("treatment indicator at row {row} is {value}, expected 0 or 1")]
    NonBinaryTreatment { row: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariate names must be distinct and match the column count: {0}")]
    BadNames(String),

    #[error("argument outside its domain: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("balance target is infeasible: {0}")]
    Infeasible(String),

    #[error("weights over the reweighted group sum to zero")]
    ZeroWeightSum,

    #[error("|h| = {value} at index {index} exceeds log Λ = {bound}")]
    HOutOfRange { index: usize, value: f64, bound: f64 },

    #[error("resampling produced an empty group after {redraws} redraws")]
    DegenerateResampling { redraws: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("{dropped} of {total} bootstrap replicates failed, above the allowed fraction")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("confidence interval at Λ = {lambda_max} still excludes the target")]
    NotBracketed { lambda_max: f64 },

    #[error("covariate matrix is rank deficient")]
    RankDeficient,

    #[error("no usable benchmark covariates")]
    NoBenchmarks,

    #[error("error curve is empty (error bound is zero)")]
    EmptyCurve,

    #[error("sample splitting needs an even sample size, got {0}")]
    OddN(usize),

    #[error("estimand `{0}` is not supported by this operation")]
    UnsupportedEstimand(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyGroup { .. } => "EMPTY_GROUP",
            Error::NonFinite { .. } => "NON_FINITE",
            Error::NonBinaryTreatment { .. } => "NON_BINARY_TREATMENT",
            Error::Dimension(_) => "DIMENSION",
            Error::BadNames(_) => "BAD_NAMES",
            Error::Domain(_) => "DOMAIN",
            Error::NoConvergence { .. } => "NO_CONVERGENCE",
            Error::Infeasible(_) => "INFEASIBLE",
            Error::ZeroWeightSum => "ZERO_WEIGHT_SUM",
            Error::HOutOfRange { .. } => "H_OUT_OF_RANGE",
            Error::DegenerateResampling { .. } => "DEGENERATE_RESAMPLING",
            Error::EmptyInput => "EMPTY_INPUT",
            Error::TooManyDropped { .. } => "TOO_MANY_DROPPED",
            Error::NotBracketed { .. } => "NOT_BRACKETED",
            Error::RankDeficient => "RANK_DEFICIENT",
            Error::NoBenchmarks => "NO_BENCHMARKS",
            Error::EmptyCurve => "NO_CONFOUNDING_NEEDED",
            Error::OddN(_) => "ODD_N",
            Error::UnsupportedEstimand(_) => "UNSUPPORTED_ESTIMAND",
            Error::Config(_) => "CONFIG",
        }
    }

    /// Solver-side failures, as opposed to bad input.
    pub fn is_solver_error(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Infeasible(_)
                | Error::ZeroWeightSum
                | Error::DegenerateResampling { .. }
                | Error::TooManyDropped { .. }
                | Error::RankDeficient
        )
    }
}
