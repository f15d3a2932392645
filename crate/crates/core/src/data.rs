//! Data model shared by every analysis: the observed table, estimands,
//! sensitivity configuration and intervals.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed data `(Y, Z, X)` with covariate names.
///
/// Construction validates the table, so every `Dataset` in circulation has
/// both treatment groups nonempty and only finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    z: Vec<bool>,
    x: DMatrix<f64>,
    names: Vec<String>,
    n1: usize,
}

impl Dataset {
    /// Validates a raw table. `z` is given as reals so that non-binary codes
    /// can be reported rather than silently coerced.
    pub fn new(y: Vec<f64>, z: Vec<f64>, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if z.len() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {} rows, z has {}, x has {}",
                n,
                z.len(),
                x.nrows()
            )));
        }
        let mut flags = Vec::with_capacity(n);
        for (row, &value) in z.iter().enumerate() {
            if value == 1.0 {
                flags.push(true);
            } else if value == 0.0 {
                flags.push(false);
            } else {
                return Err(Error::NonBinaryTreatment { row, value });
            }
        }
        Self::from_parts(y, flags, x, names)
    }

    fn from_parts(y: Vec<f64>, z: Vec<bool>, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if z.len() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {} rows, z has {}, x has {}",
                n,
                z.len(),
                x.nrows()
            )));
        }
        if names.len() != x.ncols() {
            return Err(Error::BadNames(format!(
                "{} names for {} covariate columns",
                names.len(),
                x.ncols()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::BadNames(format!("duplicate name `{name}`")));
            }
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: "y".into(), row });
        }
        for j in 0..x.ncols() {
            if let Some(row) = x.column(j).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { field: names[j].clone(), row });
            }
        }
        let n1 = z.iter().filter(|&&t| t).count();
        if n1 == 0 || n1 == n {
            return Err(Error::EmptyGroup { n1, n0: n - n1 });
        }
        Ok(Dataset { y, z, x, names, n1 })
    }

    /// Re-checks every invariant; idempotent.
    pub fn validate(&self) -> Result<Dataset> {
        Self::from_parts(self.y.clone(), self.z.clone(), self.x.clone(), self.names.clone())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n() - self.n1
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows_in(&self, group: Group) -> Vec<usize> {
        let want = group == Group::Treated;
        (0..self.n()).filter(|&i| self.z[i] == want).collect()
    }

    pub fn group_size(&self, group: Group) -> usize {
        match group {
            Group::Treated => self.n1,
            Group::Control => self.n0(),
        }
    }

    /// Rows in the given order (repeats allowed). Fails if a group empties.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let z = rows.iter().map(|&i| self.z[i]).collect();
        let x = self.x.select_rows(rows.iter());
        Self::from_parts(y, z, x, self.names.clone())
    }

    /// Same covariates and treatment, different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        Self::from_parts(y, self.z.clone(), self.x.clone(), self.names.clone())
    }

    pub(crate) fn with_covariates(&self, x: DMatrix<f64>) -> Dataset {
        Dataset { x, ..self.clone() }
    }
}

/// Which treatment arm a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Treated,
    Control,
}

/// The population whose covariate means the weights must reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceTarget {
    FullSample,
    Treated,
}

/// How the sensitivity parameter perturbs a unit's weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftForm {
    /// `1 + (γ − 1)·r`, for inverse-probability-scale weights.
    InverseProbability,
    /// `γ / r`, for odds-scale weights on controls targeting the treated.
    Odds,
}

/// A single weighted mean: one group reweighted toward one target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKind {
    /// E[Y(1)]: treated reweighted to the full sample.
    Mu1,
    /// E[Y(0)]: controls reweighted to the full sample.
    Mu0,
    /// E[Y(0) | Z = 1]: controls reweighted to the treated.
    Mu01,
}

impl MeanKind {
    pub fn group(self) -> Group {
        match self {
            MeanKind::Mu1 => Group::Treated,
            MeanKind::Mu0 | MeanKind::Mu01 => Group::Control,
        }
    }

    pub fn target(self) -> BalanceTarget {
        match self {
            MeanKind::Mu1 | MeanKind::Mu0 => BalanceTarget::FullSample,
            MeanKind::Mu01 => BalanceTarget::Treated,
        }
    }

    pub fn shift_form(self) -> ShiftForm {
        match self {
            MeanKind::Mu1 | MeanKind::Mu0 => ShiftForm::InverseProbability,
            MeanKind::Mu01 => ShiftForm::Odds,
        }
    }

    /// Count the weights are normalised to (Σγ over the group).
    pub fn normalizer(self, data: &Dataset) -> usize {
        match self.target() {
            BalanceTarget::FullSample => data.n(),
            BalanceTarget::Treated => data.n1(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeanKind::Mu1 => "mu1",
            MeanKind::Mu0 => "mu0",
            MeanKind::Mu01 => "mu01",
        }
    }
}

/// Target causal quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Mu1,
    Mu0,
    Mu01,
    Ate,
    Att,
}

impl Estimand {
    /// The weighted means this estimand is built from.
    pub fn components(self) -> &'static [MeanKind] {
        match self {
            Estimand::Mu1 => &[MeanKind::Mu1],
            Estimand::Mu0 => &[MeanKind::Mu0],
            Estimand::Mu01 | Estimand::Att => &[MeanKind::Mu01],
            Estimand::Ate => &[MeanKind::Mu1, MeanKind::Mu0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimand::Mu1 => "mu1",
            Estimand::Mu0 => "mu0",
            Estimand::Mu01 => "mu01",
            Estimand::Ate => "ate",
            Estimand::Att => "att",
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mu1" => Ok(Estimand::Mu1),
            "mu0" => Ok(Estimand::Mu0),
            "mu01" => Ok(Estimand::Mu01),
            "ate" => Ok(Estimand::Ate),
            "att" => Ok(Estimand::Att),
            other => Err(Error::Config(format!("unknown estimand `{other}`"))),
        }
    }
}

/// Sensitivity analysis knobs: Λ, α, B, seed and the minimal effect size ι.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensConfig {
    pub lambda_sens: f64,
    pub alpha: f64,
    pub b_reps: usize,
    pub seed: u64,
    /// Minimal effect size for equivalence-mode Λ*; 0 disables it.
    pub iota: f64,
}

impl SensConfig {
    pub fn new(lambda_sens: f64, alpha: f64, b_reps: usize, seed: u64, iota: f64) -> Result<Self> {
        let cfg = SensConfig { lambda_sens, alpha, b_reps, seed, iota };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda_sens >= 1.0) || !self.lambda_sens.is_finite() {
            return Err(Error::Domain(format!("Λ must be ≥ 1, got {}", self.lambda_sens)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("α must lie in (0, 1), got {}", self.alpha)));
        }
        if self.b_reps == 0 {
            return Err(Error::Domain("B must be positive".into()));
        }
        if !(self.iota >= 0.0) || !self.iota.is_finite() {
            return Err(Error::Domain(format!("ι must be ≥ 0, got {}", self.iota)));
        }
        Ok(())
    }
}

impl Default for SensConfig {
    fn default() -> Self {
        SensConfig { lambda_sens: 1.0, alpha: 0.05, b_reps: 1000, seed: 0, iota: 0.0 }
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Domain(format!("interval [{lo}, {hi}] is not ordered")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn point(value: f64) -> Self {
        Interval { lo: value, hi: value }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    /// `self ⊆ other`.
    pub fn is_within(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Per-column location and scale recorded by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Columns with zero spread; they are set to 0 after standardization.
    pub constant: Vec<bool>,
}

impl Scaling {
    /// Maps a standardized value of column `j` back to raw units.
    pub fn unscale(&self, j: usize, value: f64) -> f64 {
        if self.constant[j] {
            self.mean[j]
        } else {
            value * self.sd[j] + self.mean[j]
        }
    }

    pub fn flagged(&self) -> Vec<usize> {
        (0..self.constant.len()).filter(|&j| self.constant[j]).collect()
    }
}

/// Centres every covariate to mean 0 and scales it to unit standard
/// deviation (denominator n − 1) over the full sample. Outcomes are untouched.
pub fn standardize(data: &Dataset) -> (Dataset, Scaling) {
    let n = data.n();
    let d = data.d();
    let mut x = data.x().clone();
    let mut scaling = Scaling { mean: vec![0.0; d], sd: vec![0.0; d], constant: vec![false; d] };
    for j in 0..d {
        let mut col = x.column_mut(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        let constant = !(sd > 1e-12 * mean.abs().max(1.0));
        if constant {
            col.fill(0.0);
        } else {
            col.apply(|v| *v = (*v - mean) / sd);
        }
        scaling.mean[j] = mean;
        scaling.sd[j] = sd;
        scaling.constant[j] = constant;
    }
    (data.with_covariates(x), scaling)
}

/// Odds ratio `(p1 / (1 − p1)) / (p2 / (1 − p2))`.
pub fn odds_ratio(p1: f64, p2: f64) -> Result<f64> {
    for p in [p1, p2] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("probability {p} is outside (0, 1)")));
        }
    }
    Ok((p1 / (1.0 - p1)) / (p2 / (1.0 - p2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(z: Vec<f64>) -> Result<Dataset> {
        let n = z.len();
        let y = (0..n).map(|i| i as f64).collect();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 + 1.0);
        Dataset::new(y, z, x, vec!["a".into()])
    }

    #[test]
    fn counts_groups() {
        let d = tiny(vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!((d.n1(), d.n0()), (2, 1));
    }

    #[test]
    fn rejects_empty_group() {
        assert_eq!(tiny(vec![1.0, 1.0, 1.0]).unwrap_err().code(), "EMPTY_GROUP");
        assert_eq!(tiny(vec![0.0, 0.0]).unwrap_err().code(), "EMPTY_GROUP");
    }

    #[test]
    fn rejects_non_finite() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let err = Dataset::new(vec![1.0, f64::NAN, 2.0], vec![1.0, 0.0, 1.0], x.clone(), vec!["a".into()])
            .unwrap_err();
        assert_eq!(err.code(), "NON_FINITE");
        let mut bad = x;
        bad[(2, 0)] = f64::INFINITY;
        let err = Dataset::new(vec![1.0; 3], vec![1.0, 0.0, 1.0], bad, vec!["a".into()]).unwrap_err();
        assert_eq!(err, Error::NonFinite { field: "a".into(), row: 2 });
    }

    #[test]
    fn rejects_non_binary_and_bad_names() {
        assert_eq!(tiny(vec![1.0, 2.0, 0.0]).unwrap_err().code(), "NON_BINARY_TREATMENT");
        let x = DMatrix::from_element(2, 2, 1.0);
        let err = Dataset::new(vec![0.0; 2], vec![1.0, 0.0], x, vec!["a".into(), "a".into()]).unwrap_err();
        assert_eq!(err.code(), "BAD_NAMES");
    }

    #[test]
    fn validate_is_idempotent() {
        let d = tiny(vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let once = d.validate().unwrap();
        assert_eq!(once, d);
        assert_eq!(once.validate().unwrap(), once);
    }

    #[test]
    fn standardize_small_column() {
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        let d = Dataset::new(vec![0.0; 3], vec![1.0, 0.0, 1.0], x, vec!["a".into(), "c".into()]).unwrap();
        let (s, scale) = standardize(&d);
        // mean 2, sd with n − 1 = 2 denominator is 1
        assert_eq!(s.x().column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(s.x().column(1).as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(scale.constant, vec![false, true]);
        assert_eq!(scale.flagged(), vec![1]);
        assert_eq!(scale.unscale(0, 1.0), 3.0);
        assert_eq!(scale.unscale(1, 0.0), 5.0);
    }

    #[test]
    fn odds_ratio_examples() {
        assert_eq!(odds_ratio(0.5, 0.5).unwrap(), 1.0);
        assert!((odds_ratio(2.0 / 3.0, 0.5).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(odds_ratio(0.0, 0.5).unwrap_err().code(), "DOMAIN");
        assert_eq!(odds_ratio(0.5, 1.0).unwrap_err().code(), "DOMAIN");
    }

    #[test]
    fn estimand_parsing() {
        assert_eq!("ATT".parse::<Estimand>().unwrap(), Estimand::Att);
        assert!("foo".parse::<Estimand>().is_err());
        assert_eq!(Estimand::Ate.components(), &[MeanKind::Mu1, MeanKind::Mu0]);
    }

    #[test]
    fn sens_config_checks() {
        assert!(SensConfig::new(0.9, 0.05, 10, 1, 0.0).is_err());
        assert!(SensConfig::new(1.0, 1.0, 10, 1, 0.0).is_err());
        assert!(SensConfig::new(1.0, 0.05, 0, 1, 0.0).is_err());
        assert!(SensConfig::new(2.0, 0.05, 10, 1, 0.1).is_ok());
    }

    #[test]
    fn interval_ordering() {
        assert!(Interval::new(2.0, 1.0).is_err());
        let a = Interval::new(0.0, 1.0).unwrap();
        assert!(a.contains(0.0) && a.contains(1.0) && !a.contains(1.5));
        assert!(Interval::point(0.5).is_within(&a));
    }
}
