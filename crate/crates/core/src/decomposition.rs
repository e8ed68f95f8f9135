//! Plug-in estimators of the three variance components.
//!
//! With `mu_i(z)` the fitted mean of patient `i` had they been treated in
//! hospital `z` and `P(z | x_i)` the fitted assignment probabilities:
//!
//! * `omega1` : sample variance (divisor `n-1`) of the expected care level
//!   `e_i = sum_z mu_i(z) P(z | x_i)`; variance explained by case-mix.
//! * `omega2` : mean over patients of the `P(. | x_i)`-weighted variance of
//!   `mu_i(.)` (divisor `n`); between-hospital variance given case-mix.
//! * `omega3` : residual, either the empirical total minus the other two or
//!   the model-implied conditional variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_glm, GlmFit};
use crate::linalg::compensated_sum;
use crate::mixed::{fit_random_intercept, MixedFit};
use crate::model::{
    empirical_total_variance_with, Dataset, EffectMode, LinkFunction, OutcomeKind, TotalVariance, VarianceDivisor,
};
use crate::multinomial::{fit_multinomial, AssignmentFit};
use crate::uncertainty::Intervals;

/// Default assignment-model volume threshold (hospitals below it get intercepts only).
pub const DEFAULT_VOLUME_THRESHOLD: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// Empirical total variance minus `omega1` and `omega2`.
    Subtraction,
    /// Model-implied conditional variance.
    Distributional,
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "subtraction" => Ok(ResidualMode::Subtraction),
            "distributional" => Ok(ResidualMode::Distributional),
            other => Err(Error::Config(format!("unknown residual mode `{other}`"))),
        }
    }
}

/// A fitted outcome model of either kind.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "effects", rename_all = "lowercase")]
pub enum OutcomeFit {
    Fixed(GlmFit),
    Random(MixedFit),
}

impl OutcomeFit {
    pub fn fit(ds: &Dataset, link: LinkFunction, effects: EffectMode) -> Result<Self> {
        match effects {
            EffectMode::Fixed => fit_glm(ds, link).map(OutcomeFit::Fixed),
            EffectMode::Random => fit_random_intercept(ds, link).map(OutcomeFit::Random),
        }
    }

    pub fn predict_mu(&self, hospital: usize, x: &[f64]) -> Result<f64> {
        match self {
            OutcomeFit::Fixed(f) => f.predict_mu(hospital, x),
            OutcomeFit::Random(f) => f.predict_mu(hospital, x),
        }
    }

    pub fn link(&self) -> LinkFunction {
        match self {
            OutcomeFit::Fixed(f) => f.link,
            OutcomeFit::Random(f) => f.link,
        }
    }

    pub fn effects(&self) -> EffectMode {
        match self {
            OutcomeFit::Fixed(_) => EffectMode::Fixed,
            OutcomeFit::Random(_) => EffectMode::Random,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            OutcomeFit::Fixed(f) => f.m(),
            OutcomeFit::Random(f) => f.m(),
        }
    }

    pub fn p(&self) -> usize {
        match self {
            OutcomeFit::Fixed(f) => f.p(),
            OutcomeFit::Random(f) => f.p(),
        }
    }

    pub fn sigma2(&self) -> Option<f64> {
        match self {
            OutcomeFit::Fixed(f) => f.sigma2,
            OutcomeFit::Random(f) => f.sigma2,
        }
    }

    pub fn tau2(&self) -> Option<f64> {
        match self {
            OutcomeFit::Fixed(_) => None,
            OutcomeFit::Random(f) => Some(f.tau2),
        }
    }

    /// Per-hospital intercepts on the linear-predictor scale (`alpha0 + alpha_z`).
    pub fn hospital_intercepts(&self) -> Vec<f64> {
        match self {
            OutcomeFit::Fixed(f) => f.hospital_offsets().iter().map(|a| f.alpha0() + a).collect(),
            OutcomeFit::Random(f) => f.eb_intercepts.iter().map(|a| f.alpha0 + a).collect(),
        }
    }

    fn provenance(&self) -> String {
        format!(
            "{}-effects {} outcome model",
            match self.effects() {
                EffectMode::Fixed => "fixed",
                EffectMode::Random => "random",
            },
            self.link().name()
        )
    }
}

/// Dense `n x m` tables of fitted means and assignment probabilities.
#[derive(Debug, Clone)]
pub struct MuTable {
    n: usize,
    m: usize,
    mu: Vec<f64>,
    probs: Vec<f64>,
    pub link: LinkFunction,
    /// Residual variance of an identity-link outcome model.
    pub sigma2: Option<f64>,
    pub outcome_provenance: String,
    pub assignment_provenance: String,
}

impl MuTable {
    /// Build from row-major `n x m` tables.
    pub fn new(n: usize, m: usize, mu: Vec<f64>, probs: Vec<f64>, link: LinkFunction) -> Result<Self> {
        if mu.len() != n * m || probs.len() != n * m {
            return Err(Error::DimensionMismatch(format!("tables must be {n} x {m}")));
        }
        for i in 0..n {
            let s: f64 = probs[i * m..(i + 1) * m].iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidData(format!("assignment probabilities of row {i} sum to {s}")));
            }
        }
        Ok(MuTable {
            n,
            m,
            mu,
            probs,
            link,
            sigma2: None,
            outcome_provenance: "explicit".into(),
            assignment_provenance: "explicit".into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mu(&self, i: usize, z: usize) -> f64 {
        self.mu[i * self.m + z]
    }

    pub fn prob(&self, i: usize, z: usize) -> f64 {
        self.probs[i * self.m + z]
    }

    fn mu_row(&self, i: usize) -> &[f64] {
        &self.mu[i * self.m..(i + 1) * self.m]
    }

    fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.m..(i + 1) * self.m]
    }

    /// Expected care level `e_i = sum_z mu_i(z) P(z | x_i)`.
    pub fn expected(&self, i: usize) -> f64 {
        self.mu_row(i).iter().zip(self.prob_row(i)).map(|(a, b)| a * b).sum()
    }

    /// Same means with every assignment probability replaced by `1/m`.
    pub fn with_equal_weights(&self) -> Self {
        let mut out = self.clone();
        out.probs = vec![1.0 / self.m as f64; self.n * self.m];
        out.assignment_provenance = "equal weights".into();
        out
    }
}

/// Evaluate `mu_i(z)` and `P(Z = z | x_i)` for every patient and hospital.
pub fn build_tables(outcome: &OutcomeFit, assignment: &AssignmentFit, ds: &Dataset) -> Result<MuTable> {
    let (n, m, p) = (ds.n(), ds.m(), ds.p());
    if outcome.m() != m || assignment.m() != m || outcome.p() != p || assignment.p() != p {
        return Err(Error::DimensionMismatch(format!(
            "dataset has m = {m}, p = {p}; outcome fit m = {}, p = {}; assignment fit m = {}, p = {}",
            outcome.m(),
            outcome.p(),
            assignment.m(),
            assignment.p()
        )));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = ds.x(i);
            let mu = (0..m).map(|z| outcome.predict_mu(z, x)).collect::<Result<Vec<f64>>>()?;
            let mut pr = vec![0.0; m];
            assignment.predict_into(x, &mut pr);
            Ok((mu, pr))
        })
        .collect::<Result<_>>()?;
    let mut mu = Vec::with_capacity(n * m);
    let mut probs = Vec::with_capacity(n * m);
    for (a, b) in rows {
        mu.extend(a);
        probs.extend(b);
    }
    let mut t = MuTable::new(n, m, mu, probs, outcome.link())?;
    t.sigma2 = outcome.sigma2();
    t.outcome_provenance = outcome.provenance();
    t.assignment_provenance = format!(
        "multinomial logistic assignment model (volume threshold {})",
        assignment.volume_threshold
    );
    Ok(t)
}

/// Variance explained by case-mix (divisor `n-1`).
pub fn omega1(t: &MuTable) -> f64 {
    let e: Vec<f64> = (0..t.n()).map(|i| t.expected(i)).collect();
    let mean = compensated_sum(e.iter().copied()) / t.n() as f64;
    compensated_sum(e.iter().map(|v| (v - mean) * (v - mean))) / (t.n() as f64 - 1.0)
}

/// Average between-hospital variance conditional on case-mix (divisor `n`).
pub fn omega2(t: &MuTable) -> f64 {
    let per_patient = (0..t.n()).map(|i| {
        let e = t.expected(i);
        t.mu_row(i)
            .iter()
            .zip(t.prob_row(i))
            .map(|(mu, p)| p * (mu - e) * (mu - e))
            .sum::<f64>()
    });
    compensated_sum(per_patient) / t.n() as f64
}

/// Residual component. In subtraction mode the result may be negative; the flag says so.
pub fn omega3(t: &MuTable, ds: &Dataset, mode: ResidualMode) -> Result<(f64, bool)> {
    match mode {
        ResidualMode::Subtraction => {
            let total = empirical_total_variance_with(ds, ds.kind().default_divisor()).value;
            let v = total - omega1(t) - omega2(t);
            Ok((v, v < 0.0))
        }
        ResidualMode::Distributional => Ok((distributional_residual(t)?, false)),
    }
}

fn distributional_residual(t: &MuTable) -> Result<f64> {
    match (t.link, t.sigma2) {
        (LinkFunction::Logit, _) => {
            let per_patient = (0..t.n()).map(|i| {
                t.mu_row(i)
                    .iter()
                    .zip(t.prob_row(i))
                    .map(|(mu, p)| mu * (1.0 - mu) * p)
                    .sum::<f64>()
            });
            Ok(compensated_sum(per_patient) / t.n() as f64)
        }
        (LinkFunction::Identity, Some(s2)) => Ok(s2),
        (LinkFunction::Identity, None) => Err(Error::Config(
            "distributional residual needs a logit link or an identity-link fit with sigma2".into(),
        )),
    }
}

/// Closed form for two hospitals: `mean_i pi_i (1 - pi_i) (mu_i(1) - mu_i(2))^2`.
pub fn two_hospital_omega2(t: &MuTable) -> Result<f64> {
    if t.m() != 2 {
        return Err(Error::InvalidData(format!("two-hospital form needs m = 2, got {}", t.m())));
    }
    let per_patient = (0..t.n()).map(|i| {
        let pi = t.prob(i, 0);
        let d = t.mu(i, 0) - t.mu(i, 1);
        pi * (1.0 - pi) * d * d
    });
    Ok(compensated_sum(per_patient) / t.n() as f64)
}

/// `omega2` under a hypothetical assignment that spreads every patient evenly
/// over the hospitals.
pub fn equal_weight_omega2(outcome: &OutcomeFit, ds: &Dataset) -> Result<f64> {
    let m = ds.m();
    let uniform = AssignmentFit::from_parts(vec![0.0; m], vec![vec![0.0; ds.p()]; m], vec![true; m])?;
    Ok(omega2(&build_tables(outcome, &uniform, ds)?))
}

/// Intraclass correlation `tau2 / (tau2 + sigma2)` of a linear random-intercept model.
pub fn icc_linear(tau2: f64, sigma2: f64) -> Result<f64> {
    if !(tau2 >= 0.0) || !(sigma2 > 0.0) {
        return Err(Error::InvalidData(format!(
            "ICC needs tau2 >= 0 and sigma2 > 0 (got tau2 = {tau2}, sigma2 = {sigma2})"
        )));
    }
    Ok(tau2 / (tau2 + sigma2))
}

/// The three components evaluated on one pair of tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Components {
    pub omega: [f64; 3],
    pub negative_residual: bool,
}

impl Components {
    pub fn proportions(&self, total: f64) -> Option<[f64; 3]> {
        (total > 0.0).then(|| self.omega.map(|w| w / total))
    }
}

/// Shared code path for point estimates and posterior draws.
pub fn components(t: &MuTable, total: &TotalVariance, mode: ResidualMode) -> Result<Components> {
    let w1 = omega1(t);
    let w2 = omega2(t);
    let w3 = match mode {
        ResidualMode::Subtraction => total.value - w1 - w2,
        ResidualMode::Distributional => distributional_residual(t)?,
    };
    Ok(Components {
        omega: [w1, w2, w3],
        negative_residual: w3 < 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposeConfig {
    /// Outcome link; defaults to logit for binary outcomes and identity otherwise.
    pub link: Option<LinkFunction>,
    pub effects: EffectMode,
    pub residual_mode: ResidualMode,
    pub volume_threshold: usize,
    /// Divisor of the empirical total variance; defaults by outcome kind.
    pub divisor: Option<VarianceDivisor>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            link: None,
            effects: EffectMode::Fixed,
            residual_mode: ResidualMode::Subtraction,
            volume_threshold: DEFAULT_VOLUME_THRESHOLD,
            divisor: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutcomeDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub separation: bool,
    pub tau2: Option<f64>,
    pub sigma2: Option<f64>,
    pub tau2_at_boundary: Option<bool>,
    pub lr_statistic: Option<f64>,
    pub icc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssignmentDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub separation: bool,
    pub volume_threshold: usize,
    pub intercept_only_hospitals: usize,
    pub free_parameters: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    pub omega1_divisor: VarianceDivisor,
    pub omega2_divisor: VarianceDivisor,
    pub omega3_divisor: VarianceDivisor,
    pub total_divisor: VarianceDivisor,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionResult {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub total: f64,
    pub proportions: Option<[f64; 3]>,
    pub intervals: Option<Intervals>,
    pub residual_mode: ResidualMode,
    /// Subtraction-mode residual came out negative (possible misspecification).
    pub negative_residual: bool,
    pub conventions: Conventions,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub outcome_kind: OutcomeKind,
    pub link: LinkFunction,
    pub effects: EffectMode,
    pub outcome_diagnostics: OutcomeDiagnostics,
    pub assignment_diagnostics: AssignmentDiagnostics,
    pub notes: Vec<String>,
}

/// Point decomposition together with the fitted models it came from.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub result: DecompositionResult,
    pub outcome: OutcomeFit,
    pub assignment: AssignmentFit,
    pub tables: MuTable,
    pub total: TotalVariance,
}

pub fn fit_assignment(ds: &Dataset, volume_threshold: usize) -> Result<AssignmentFit> {
    if ds.m() == 1 {
        Ok(AssignmentFit::single_hospital(ds.p()))
    } else {
        fit_multinomial(ds, volume_threshold)
    }
}

/// Fit both models on `ds` and decompose its total variance.
pub fn decompose(ds: &Dataset, cfg: &DecomposeConfig) -> Result<Decomposition> {
    let link = cfg.link.unwrap_or_else(|| ds.kind().default_link());
    let outcome = OutcomeFit::fit(ds, link, cfg.effects)?;
    let assignment = fit_assignment(ds, cfg.volume_threshold)?;
    decompose_fitted(ds, outcome, assignment, cfg)
}

/// Decompose with already fitted models.
pub fn decompose_fitted(
    ds: &Dataset,
    outcome: OutcomeFit,
    assignment: AssignmentFit,
    cfg: &DecomposeConfig,
) -> Result<Decomposition> {
    let divisor = cfg.divisor.unwrap_or_else(|| ds.kind().default_divisor());
    let total = empirical_total_variance_with(ds, divisor);
    let tables = build_tables(&outcome, &assignment, ds)?;
    let comps = components(&tables, &total, cfg.residual_mode)?;
    let mut notes = Vec::new();
    if comps.negative_residual {
        log::warn!("subtraction-mode residual variance is negative ({:.4e})", comps.omega[2]);
        notes.push("negative residual variance in subtraction mode: check the outcome model".into());
    }
    let outcome_diagnostics = match &outcome {
        OutcomeFit::Fixed(f) => OutcomeDiagnostics {
            converged: f.converged,
            iterations: f.iterations,
            separation: f.separation,
            tau2: None,
            sigma2: f.sigma2,
            tau2_at_boundary: None,
            lr_statistic: None,
            icc: None,
        },
        OutcomeFit::Random(f) => {
            notes.push(
                "random hospital effects are used for shrinkage only; tau2 is reported but is not the between-hospital component"
                    .into(),
            );
            OutcomeDiagnostics {
                converged: f.converged,
                iterations: f.iterations,
                separation: false,
                tau2: Some(f.tau2),
                sigma2: f.sigma2,
                tau2_at_boundary: Some(f.at_boundary),
                lr_statistic: Some(f.lr_statistic),
                icc: f.sigma2.and_then(|s2| icc_linear(f.tau2, s2).ok()),
            }
        }
    };
    let assignment_diagnostics = AssignmentDiagnostics {
        converged: assignment.converged,
        iterations: assignment.iterations,
        separation: assignment.separation,
        volume_threshold: assignment.volume_threshold,
        intercept_only_hospitals: (1..assignment.m()).filter(|&z| assignment.intercept_only[z]).count(),
        free_parameters: assignment.free_len(),
    };
    let result = DecompositionResult {
        omega1: comps.omega[0],
        omega2: comps.omega[1],
        omega3: comps.omega[2],
        total: total.value,
        proportions: comps.proportions(total.value),
        intervals: None,
        residual_mode: cfg.residual_mode,
        negative_residual: comps.negative_residual,
        conventions: Conventions {
            omega1_divisor: VarianceDivisor::NMinusOne,
            omega2_divisor: VarianceDivisor::N,
            omega3_divisor: VarianceDivisor::N,
            total_divisor: divisor,
        },
        n: ds.n(),
        m: ds.m(),
        p: ds.p(),
        outcome_kind: ds.kind(),
        link: outcome.link(),
        effects: outcome.effects(),
        outcome_diagnostics,
        assignment_diagnostics,
        notes,
    };
    Ok(Decomposition {
        result,
        outcome,
        assignment,
        tables,
        total,
    })
}
