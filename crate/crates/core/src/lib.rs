//! Balancing-weights estimators of causal effects with a percentile-bootstrap
//! sensitivity analysis under the marginal sensitivity model.
//!
//! The pieces, bottom up:
//!
//! * [`data`]: validated datasets, estimands, standardization.
//! * [`balancer`]: stable balancing weights (via the Lagrangian dual) and
//!   entropy balancing, plus Hájek point estimates.
//! * [`sensitivity`]: shifted estimators and their exact extrema over the
//!   sensitivity set (linear-fractional program, Dinkelbach iteration).
//! * [`bootstrap`]: percentile-bootstrap intervals and the Λ* search.
//! * [`amplification`]: oracle weights, error bounds and the
//!   imbalance × outcome-strength decomposition with contour data.
//! * [`simulate`]: a synthetic data-generating process with coverage and
//!   sample-splitting experiments.

pub use nalgebra;

pub mod amplification;
pub mod balancer;
pub mod bootstrap;
pub mod data;
pub mod error;
pub mod linalg;
pub mod sensitivity;
pub mod simulate;

pub use balancer::{balance_table, fit_estimand, fit_weights, point_estimate, BalanceMethod, BalanceSpec, EstimandFit, WeightFit};
pub use bootstrap::{BootstrapAnalysis, BootstrapPlan, LambdaSearch, LambdaStar, SensitivityResult};
pub use data::{standardize, Dataset, Estimand, Interval, MeanKind, SensConfig};
pub use error::{Error, Result};
pub use sensitivity::{extrema, ExtremaResult};
