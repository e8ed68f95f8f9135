//! Shared domain types: link functions, effect modes and the validated
//! patient-level dataset.
//!
//! Hospitals are stored as 0-based indices `0..m`; index 0 is the reference
//! hospital ("hospital 1") for both the outcome and the assignment model.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::compensated_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    Identity,
    Logit,
}

impl LinkFunction {
    /// Forward map `g(mu)`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => mu,
            LinkFunction::Logit => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Inverse map `g^-1(eta)`.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Logit => expit(eta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Logit => "logit",
        }
    }
}

impl std::str::FromStr for LinkFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(LinkFunction::Identity),
            "logit" => Ok(LinkFunction::Logit),
            other => Err(Error::Config(format!("unknown link `{other}`"))),
        }
    }
}

/// Numerically stable logistic function.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
pub fn log1pexp(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}

/// How hospital intercepts enter the outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectMode {
    /// Fixed offsets with the reference hospital pinned at 0.
    Fixed,
    /// Random intercepts `alpha_z ~ N(0, tau2)`.
    Random,
}

impl std::str::FromStr for EffectMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" | "fe" => Ok(EffectMode::Fixed),
            "random" | "re" => Ok(EffectMode::Random),
            other => Err(Error::Config(format!("unknown effect mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

impl OutcomeKind {
    /// The link of the correctly specified model for this kind of outcome.
    pub fn default_link(self) -> LinkFunction {
        match self {
            OutcomeKind::Binary => LinkFunction::Logit,
            OutcomeKind::Continuous => LinkFunction::Identity,
        }
    }

    pub fn default_divisor(self) -> VarianceDivisor {
        match self {
            OutcomeKind::Binary => VarianceDivisor::N,
            OutcomeKind::Continuous => VarianceDivisor::NMinusOne,
        }
    }
}

impl std::str::FromStr for OutcomeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(OutcomeKind::Binary),
            "continuous" => Ok(OutcomeKind::Continuous),
            other => Err(Error::Config(format!("unknown outcome kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceDivisor {
    /// `1/n`; equals `p(1-p)` for a binary outcome.
    #[serde(rename = "n")]
    N,
    #[serde(rename = "n-1")]
    NMinusOne,
}

/// Parsed but unvalidated columns.
#[derive(Debug, Clone, Default)]
pub struct RawData {
    pub outcome: Vec<f64>,
    pub hospital: Vec<String>,
    /// One vector per covariate column.
    pub covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
}

/// Validated patient-level records. Immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset {
    outcome: Vec<f64>,
    hospital: Vec<usize>,
    /// Row-major `n x p`.
    covariates: Vec<f64>,
    p: usize,
    hospital_labels: Vec<String>,
    covariate_names: Vec<String>,
    kind: OutcomeKind,
}

/// Map arbitrary labels onto `0..m`, preserving the natural order of the
/// labels (numeric when every label is an integer, lexicographic otherwise).
pub fn compact_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let numeric: Option<Vec<i64>> = labels.iter().map(|s| s.trim().parse::<i64>().ok()).collect();
    let order: Vec<String> = match numeric {
        Some(nums) => {
            let mut uniq: BTreeMap<i64, String> = BTreeMap::new();
            for (k, s) in nums.iter().zip(labels) {
                uniq.entry(*k).or_insert_with(|| s.trim().to_string());
            }
            uniq.into_values().collect()
        }
        None => {
            let uniq: std::collections::BTreeSet<&str> = labels.iter().map(|s| s.trim()).collect();
            uniq.into_iter().map(str::to_string).collect()
        }
    };
    let index: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let codes = labels.iter().map(|s| index[s.trim()]).collect();
    (codes, order)
}

impl Dataset {
    /// Validate raw columns. `kind = None` infers binary when every outcome is 0 or 1.
    pub fn validate(raw: RawData, kind: Option<OutcomeKind>) -> Result<Self> {
        let n = raw.outcome.len();
        if raw.hospital.len() != n {
            return Err(Error::InvalidData(format!(
                "ragged columns: {} outcomes but {} hospital labels",
                n,
                raw.hospital.len()
            )));
        }
        if raw.covariates.len() != raw.covariate_names.len() {
            return Err(Error::InvalidData(format!(
                "{} covariate columns but {} names",
                raw.covariates.len(),
                raw.covariate_names.len()
            )));
        }
        for (col, name) in raw.covariates.iter().zip(&raw.covariate_names) {
            if col.len() != n {
                return Err(Error::InvalidData(format!(
                    "ragged columns: covariate `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("covariate `{name}` has non-finite values")));
            }
        }
        let (codes, labels) = compact_labels(&raw.hospital);
        let p = raw.covariates.len();
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            for col in &raw.covariates {
                rows.push(col[i]);
            }
        }
        Self::from_parts(raw.outcome, codes, rows, p, labels, raw.covariate_names, kind)
    }

    /// Build from already-compacted hospital indices and row-major covariates.
    pub fn from_parts(
        outcome: Vec<f64>,
        hospital: Vec<usize>,
        covariates: Vec<f64>,
        p: usize,
        hospital_labels: Vec<String>,
        covariate_names: Vec<String>,
        kind: Option<OutcomeKind>,
    ) -> Result<Self> {
        let n = outcome.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 patients, got {n}")));
        }
        if hospital.len() != n || covariates.len() != n * p || covariate_names.len() != p {
            return Err(Error::InvalidData("ragged columns".into()));
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidData("outcome has non-finite values".into()));
        }
        let m = hospital_labels.len();
        let mut counts = vec![0usize; m];
        for &h in &hospital {
            if h >= m {
                return Err(Error::UnknownHospital { index: h, count: m });
            }
            counts[h] += 1;
        }
        if let Some(z) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidData(format!("hospital `{}` has no patients", hospital_labels[z])));
        }
        let is_binary = outcome.iter().all(|&y| y == 0.0 || y == 1.0);
        let kind = match kind {
            Some(OutcomeKind::Binary) if !is_binary => {
                return Err(Error::InvalidData("outcome not in {0,1}".into()));
            }
            Some(k) => k,
            None if is_binary => OutcomeKind::Binary,
            None => OutcomeKind::Continuous,
        };
        Ok(Dataset {
            outcome,
            hospital,
            covariates,
            p,
            hospital_labels,
            covariate_names,
            kind,
        })
    }

    /// Same design with a different outcome vector (bootstrap replicates).
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        if outcome.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "replacement outcome has {} rows, expected {}",
                outcome.len(),
                self.n()
            )));
        }
        let mut ds = self.clone();
        ds.outcome = outcome;
        if ds.kind == OutcomeKind::Binary && ds.outcome.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidData("outcome not in {0,1}".into()));
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of hospitals.
    pub fn m(&self) -> usize {
        self.hospital_labels.len()
    }

    /// Number of case-mix covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn hospital(&self) -> &[usize] {
        &self.hospital
    }

    /// Covariate row of patient `i`.
    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    pub fn hospital_labels(&self) -> &[String] {
        &self.hospital_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn hospital_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.m()];
        for &h in &self.hospital {
            counts[h] += 1;
        }
        counts
    }
}

/// Empirical marginal variance of the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalVariance {
    pub value: f64,
    pub divisor: VarianceDivisor,
}

/// Sample variance of the outcome with the default divisor for the dataset's
/// outcome kind (`n` for binary, `n-1` for continuous).
pub fn empirical_total_variance(ds: &Dataset) -> TotalVariance {
    empirical_total_variance_with(ds, ds.kind().default_divisor())
}

pub fn empirical_total_variance_with(ds: &Dataset, divisor: VarianceDivisor) -> TotalVariance {
    TotalVariance {
        value: sample_variance(ds.outcome(), divisor),
        divisor,
    }
}

pub(crate) fn sample_variance(values: &[f64], divisor: VarianceDivisor) -> f64 {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    match divisor {
        VarianceDivisor::N => ss / n,
        VarianceDivisor::NMinusOne => ss / (n - 1.0),
    }
}
