//! Synthetic hospital data with known decomposition, and the replication
//! harness that compares estimators against it.
//!
//! Patients carry `X1 ~ N(0, 1)` and `X2 ~ Bernoulli(0.5)`. Hospital choice
//! follows `P(Z = z | x) ∝ exp(gamma_z + phi_z1 x1 + phi_z2 x2)` and the
//! latent outcome is `Y(z) = alpha_z + beta1 x1 + beta2 x2 + eps` with
//! `eps ~ Logistic(0, 1)`; binary outcomes are `1{Y(z) >= 0}`. Hospital
//! parameters are drawn once per study and held fixed across replicates.

use std::f64::consts::PI;
use std::io::Write;

use log::{info, warn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{decompose_fitted, fit_assignment, DecomposeConfig, OutcomeFit, ResidualMode};
use crate::error::{Error, Result};
use crate::model::{expit, Dataset, EffectMode, OutcomeKind};
use crate::rng::{child_seed, substream, Domain};
use crate::uncertainty::equal_tailed;

pub const DEFAULT_REPLICATIONS: usize = 200;
pub const DEFAULT_ORACLE_DRAWS: usize = 1_000_000;
const ORACLE_BATCHES: usize = 100;
const MAX_ASSIGNMENT_ATTEMPTS: usize = 100;
const MAX_FAILED_SHARE: f64 = 0.05;

const GAMMA_SD: f64 = 0.5;
const PHI_SD: f64 = std::f64::consts::FRAC_1_SQRT_2;
const ALPHA_SD: f64 = 2.0;
const CASE_MIX_EFFECTS: [f64; 2] = [1.0, 2.0];

/// Variance of the standard logistic distribution.
pub const LOGISTIC_VARIANCE: f64 = PI * PI / 3.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// All `alpha_z` set to zero.
    pub zero_hospital_effect: bool,
    /// `gamma = phi = 0`: every hospital equally likely regardless of case-mix.
    pub randomized_assignment: bool,
    /// `beta = 0`: case-mix does not affect the outcome.
    pub no_case_mix_effect: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospitalParams {
    pub gamma: Vec<f64>,
    pub phi: Vec<[f64; 2]>,
    pub alpha: Vec<f64>,
    pub beta: [f64; 2],
}

impl HospitalParams {
    /// Draw from the generating hyperdistributions.
    pub fn draw(m: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Domain::HospitalParams, 0);
        let g = Normal::new(0.0, GAMMA_SD).expect("finite sd");
        let f = Normal::new(0.0, PHI_SD).expect("finite sd");
        let a = Normal::new(0.0, ALPHA_SD).expect("finite sd");
        let gamma = (0..m).map(|_| g.sample(&mut rng)).collect();
        let phi = (0..m).map(|_| [f.sample(&mut rng), f.sample(&mut rng)]).collect();
        let alpha = (0..m).map(|_| a.sample(&mut rng)).collect();
        HospitalParams {
            gamma,
            phi,
            alpha,
            beta: CASE_MIX_EFFECTS,
        }
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn with_scenario(mut self, s: Scenario) -> Self {
        if s.zero_hospital_effect {
            self.alpha.iter_mut().for_each(|a| *a = 0.0);
        }
        if s.randomized_assignment {
            self.gamma.iter_mut().for_each(|g| *g = 0.0);
            self.phi.iter_mut().for_each(|p| *p = [0.0, 0.0]);
        }
        if s.no_case_mix_effect {
            self.beta = [0.0, 0.0];
        }
        self
    }

    fn check(&self) -> Result<()> {
        let m = self.m();
        if m < 2 || self.gamma.len() != m || self.phi.len() != m {
            return Err(Error::Config(format!(
                "hospital parameters need m >= 2 entries of equal length (alpha {}, gamma {}, phi {})",
                m,
                self.gamma.len(),
                self.phi.len()
            )));
        }
        Ok(())
    }

    /// True assignment probabilities for covariates `x`.
    pub fn assignment_probs(&self, x: [f64; 2], out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for z in 0..self.m() {
            out[z] = self.gamma[z] + self.phi[z][0] * x[0] + self.phi[z][1] * x[1];
            max = max.max(out[z]);
        }
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        out.iter_mut().for_each(|v| *v /= total);
    }

    /// Location of the latent outcome of a patient treated at `z`.
    pub fn location(&self, z: usize, x: [f64; 2]) -> f64 {
        self.alpha[z] + self.beta[0] * x[0] + self.beta[1] * x[1]
    }

    /// `E[Y(z) | x]` on the outcome scale.
    pub fn mean(&self, kind: OutcomeKind, z: usize, x: [f64; 2]) -> f64 {
        match kind {
            OutcomeKind::Continuous => self.location(z, x),
            OutcomeKind::Binary => expit(self.location(z, x)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub m: usize,
    pub outcome_kind: OutcomeKind,
    pub seed: u64,
    /// Drawn from `seed` when absent.
    #[serde(default)]
    pub hospital_params: Option<HospitalParams>,
    #[serde(default)]
    pub scenario: Scenario,
}

impl SimulationConfig {
    pub fn new(n: usize, m: usize, outcome_kind: OutcomeKind, seed: u64) -> Self {
        SimulationConfig {
            n,
            m,
            outcome_kind,
            seed,
            hospital_params: None,
            scenario: Scenario::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("simulation needs m >= 2 hospitals, got {}", self.m)));
        }
        if self.n < self.m {
            return Err(Error::Config(format!("simulation needs n >= m (n = {}, m = {})", self.n, self.m)));
        }
        if let Some(p) = &self.hospital_params {
            p.check()?;
            if p.m() != self.m {
                return Err(Error::Config(format!("{} hospital parameters supplied for m = {}", p.m(), self.m)));
            }
        }
        Ok(())
    }

    /// Hospital parameters with the scenario switches applied.
    pub fn params(&self) -> Result<HospitalParams> {
        self.validate()?;
        let base = match &self.hospital_params {
            Some(p) => p.clone(),
            None => HospitalParams::draw(self.m, self.seed),
        };
        Ok(base.with_scenario(self.scenario))
    }

    /// Copy with the effective hospital parameters written out, for exact reruns.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.hospital_params = Some(self.params()?);
        out.scenario = Scenario::default();
        Ok(out)
    }
}

/// Covariates, assignments and continuous latent outcomes of one replicate.
#[derive(Debug, Clone)]
pub struct Latent {
    pub x: Vec<[f64; 2]>,
    pub z: Vec<usize>,
    pub y: Vec<f64>,
}

impl Latent {
    pub fn dataset(&self, m: usize, kind: OutcomeKind) -> Result<Dataset> {
        let outcome = match kind {
            OutcomeKind::Continuous => self.y.clone(),
            OutcomeKind::Binary => self.y.iter().map(|&v| (v >= 0.0) as u8 as f64).collect(),
        };
        Dataset::from_parts(
            outcome,
            self.z.clone(),
            self.x.iter().flatten().copied().collect(),
            2,
            (1..=m).map(|z| z.to_string()).collect(),
            vec!["x1".into(), "x2".into()],
            Some(kind),
        )
    }
}

fn draw_covariates(rng: &mut ChaCha20Rng) -> [f64; 2] {
    let x1: f64 = rng.sample(rand_distr::StandardNormal);
    let x2 = (rng.random::<f64>() < 0.5) as u8 as f64;
    [x1, x2]
}

fn draw_category(rng: &mut ChaCha20Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (z, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return z;
        }
    }
    probs.len() - 1
}

fn draw_logistic(rng: &mut ChaCha20Rng) -> f64 {
    let u: f64 = rng.random();
    let u = u.max(f64::MIN_POSITIVE);
    (u / (1.0 - u)).ln()
}

/// Draw one replicate's covariates, hospitals and latent outcomes.
pub fn generate_latent(params: &HospitalParams, n: usize, seed: u64) -> Result<Latent> {
    let m = params.m();
    let mut rng = substream(seed, Domain::Replicate, 0);
    let x: Vec<[f64; 2]> = (0..n).map(|_| draw_covariates(&mut rng)).collect();
    let probs: Vec<Vec<f64>> = x
        .iter()
        .map(|&xi| {
            let mut p = vec![0.0; m];
            params.assignment_probs(xi, &mut p);
            p
        })
        .collect();
    let mut z = vec![0; n];
    let mut attempt = 0;
    loop {
        let mut counts = vec![0usize; m];
        for (zi, p) in z.iter_mut().zip(&probs) {
            *zi = draw_category(&mut rng, p);
            counts[*zi] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            break;
        }
        attempt += 1;
        if attempt >= MAX_ASSIGNMENT_ATTEMPTS {
            return Err(Error::Numerical(format!(
                "a hospital received no patients in {MAX_ASSIGNMENT_ATTEMPTS} assignment draws"
            )));
        }
    }
    let y = x
        .iter()
        .zip(&z)
        .map(|(&xi, &zi)| params.location(zi, xi) + draw_logistic(&mut rng))
        .collect();
    Ok(Latent { x, z, y })
}

/// One synthetic dataset from the study configuration.
pub fn generate(cfg: &SimulationConfig, replicate_seed: u64) -> Result<Dataset> {
    let params = cfg.params()?;
    generate_latent(&params, cfg.n, replicate_seed)?.dataset(cfg.m, cfg.outcome_kind)
}

/// Population components under the known generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthOracle {
    pub omega: [f64; 3],
    pub se: [f64; 3],
    pub draws: usize,
    pub batches: usize,
    pub seed: u64,
}

impl TruthOracle {
    pub fn total(&self) -> f64 {
        self.omega.iter().sum()
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    e: f64,
    e2: f64,
    between: f64,
    residual: f64,
}

impl Moments {
    fn add(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            e: self.e + o.e,
            e2: self.e2 + o.e2,
            between: self.between + o.between,
            residual: self.residual + o.residual,
        }
    }

    fn components(&self, kind: OutcomeKind) -> [f64; 3] {
        let mean = self.e / self.n;
        let w1 = (self.e2 / self.n - mean * mean).max(0.0);
        let w3 = match kind {
            OutcomeKind::Continuous => LOGISTIC_VARIANCE,
            OutcomeKind::Binary => self.residual / self.n,
        };
        [w1, self.between / self.n, w3]
    }
}

/// Monte Carlo evaluation of the population components, with standard errors
/// from independent batches.
pub fn oracle_truth(params: &HospitalParams, kind: OutcomeKind, draws: usize, seed: u64) -> Result<TruthOracle> {
    params.check()?;
    if draws < 2 * ORACLE_BATCHES {
        return Err(Error::Config(format!("oracle needs at least {} draws", 2 * ORACLE_BATCHES)));
    }
    if draws < 100_000 {
        warn!("oracle with only {draws} draws; consider at least 1e5");
    }
    let m = params.m();
    let per_batch = draws / ORACLE_BATCHES;
    let batches: Vec<Moments> = (0..ORACLE_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Domain::Oracle, b as u64);
            let size = if b + 1 == ORACLE_BATCHES { draws - per_batch * (ORACLE_BATCHES - 1) } else { per_batch };
            let mut probs = vec![0.0; m];
            let mut mu = vec![0.0; m];
            let mut acc = Moments::default();
            // Shift keeps the second moment well conditioned.
            let shift = params.mean(kind, 0, [0.0, 0.5]);
            for _ in 0..size {
                let x = draw_covariates(&mut rng);
                params.assignment_probs(x, &mut probs);
                for (z, v) in mu.iter_mut().enumerate() {
                    *v = params.mean(kind, z, x);
                }
                let e: f64 = mu.iter().zip(&probs).map(|(a, p)| a * p).sum();
                let between: f64 = mu.iter().zip(&probs).map(|(a, p)| p * (a - e) * (a - e)).sum();
                let residual: f64 = match kind {
                    OutcomeKind::Binary => mu.iter().zip(&probs).map(|(a, p)| p * a * (1.0 - a)).sum(),
                    OutcomeKind::Continuous => 0.0,
                };
                acc.n += 1.0;
                acc.e += e - shift;
                acc.e2 += (e - shift) * (e - shift);
                acc.between += between;
                acc.residual += residual;
            }
            acc
        })
        .collect();
    let pooled = batches.iter().fold(Moments::default(), |a, b| a.add(*b));
    let omega = pooled.components(kind);
    let per: Vec<[f64; 3]> = batches.iter().map(|b| b.components(kind)).collect();
    let k = per.len() as f64;
    let mut se = [0.0; 3];
    for (c, s) in se.iter_mut().enumerate() {
        let mean = per.iter().map(|r| r[c]).sum::<f64>() / k;
        let var = per.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (k - 1.0);
        *s = (var / k).sqrt();
    }
    if kind == OutcomeKind::Continuous {
        se[2] = 0.0;
    }
    Ok(TruthOracle {
        omega,
        se,
        draws,
        batches: ORACLE_BATCHES,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replications: usize,
    pub estimators: Vec<EffectMode>,
    /// Assignment-model volume threshold; the simulated design is correctly
    /// specified, so every hospital gets slopes by default.
    pub volume_threshold: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replications: DEFAULT_REPLICATIONS,
            estimators: vec![EffectMode::Fixed, EffectMode::Random],
            volume_threshold: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: EffectMode,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub total: f64,
    pub tau2: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentSummary {
    pub estimator: EffectMode,
    pub component: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// Monte Carlo standard error of the mean (`sd / sqrt(reps)`).
    pub mc_se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub truth: f64,
    pub truth_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub simulation: SimulationConfig,
    pub study: StudyConfig,
    pub oracle: TruthOracle,
    pub replications: usize,
    pub failed: usize,
    pub rows: Vec<ComponentSummary>,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl StudySummary {
    pub fn row(&self, estimator: EffectMode, component: &str) -> Option<&ComponentSummary> {
        self.rows.iter().find(|r| r.estimator == estimator && r.component == component)
    }
}

fn run_replicate(cfg: &SimulationConfig, params: &HospitalParams, study: &StudyConfig, r: usize) -> Result<Vec<ReplicateRecord>> {
    let seed = child_seed(cfg.seed, Domain::Replicate, r as u64);
    let ds = generate_latent(params, cfg.n, seed)?.dataset(cfg.m, cfg.outcome_kind)?;
    let assignment = fit_assignment(&ds, study.volume_threshold)?;
    let link = cfg.outcome_kind.default_link();
    study
        .estimators
        .iter()
        .map(|&effects| {
            let outcome = OutcomeFit::fit(&ds, link, effects)?;
            let dcfg = DecomposeConfig {
                link: Some(link),
                effects,
                residual_mode: ResidualMode::Subtraction,
                volume_threshold: study.volume_threshold,
                divisor: None,
            };
            let tau2 = outcome.tau2();
            let d = decompose_fitted(&ds, outcome, assignment.clone(), &dcfg)?;
            Ok(ReplicateRecord {
                replicate: r,
                estimator: effects,
                omega1: d.result.omega1,
                omega2: d.result.omega2,
                omega3: d.result.omega3,
                total: d.result.total,
                tau2,
            })
        })
        .collect()
}

fn summarize(values: &[f64], estimator: EffectMode, component: &str, truth: f64, truth_se: f64) -> Result<ComponentSummary> {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let [q025, q975] = equal_tailed(values, 0.95)?;
    let mc_se = sd / k.sqrt();
    Ok(ComponentSummary {
        estimator,
        component: component.into(),
        mean,
        sd,
        q025,
        q975,
        mc_se,
        ci_lower: mean - 1.96 * mc_se,
        ci_upper: mean + 1.96 * mc_se,
        truth,
        truth_se,
    })
}

/// Replicate, fit every estimator, and summarize the sampling distributions.
pub fn run_study(cfg: &SimulationConfig, study: &StudyConfig, oracle: &TruthOracle) -> Result<StudySummary> {
    if study.replications == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    if study.estimators.is_empty() {
        return Err(Error::Config("no estimators selected".into()));
    }
    let params = cfg.params()?;
    let results: Vec<(usize, Result<Vec<ReplicateRecord>>)> = (0..study.replications)
        .into_par_iter()
        .map(|r| (r, run_replicate(cfg, &params, study, r)))
        .collect();
    let mut records = Vec::new();
    let mut failed = 0;
    for (r, res) in results {
        match res {
            Ok(v) => records.extend(v),
            Err(e) => {
                failed += 1;
                info!("replicate {r} failed: {e}");
            }
        }
    }
    if failed as f64 > MAX_FAILED_SHARE * study.replications as f64 {
        return Err(Error::NonConvergence {
            what: format!("simulation study ({failed} of {} replicates failed)", study.replications),
            iterations: study.replications,
        });
    }
    if failed > 0 {
        warn!("{failed} of {} replicates failed and were dropped", study.replications);
    }
    let mut rows = Vec::new();
    for &est in &study.estimators {
        let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.estimator == est).collect();
        let cols: [(&str, Vec<f64>, f64, f64); 3] = [
            ("omega1", mine.iter().map(|r| r.omega1).collect(), oracle.omega[0], oracle.se[0]),
            ("omega2", mine.iter().map(|r| r.omega2).collect(), oracle.omega[1], oracle.se[1]),
            ("omega3", mine.iter().map(|r| r.omega3).collect(), oracle.omega[2], oracle.se[2]),
        ];
        for (name, vals, truth, se) in cols {
            rows.push(summarize(&vals, est, name, truth, se)?);
        }
        let tau: Vec<f64> = mine.iter().filter_map(|r| r.tau2).collect();
        if !tau.is_empty() {
            rows.push(summarize(&tau, est, "tau2", f64::NAN, f64::NAN)?);
        }
    }
    Ok(StudySummary {
        simulation: cfg.resolved()?,
        study: study.clone(),
        oracle: oracle.clone(),
        replications: study.replications - failed,
        failed,
        rows,
        records,
    })
}

pub fn write_summary_csv<W: Write>(s: &StudySummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &s.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

pub fn write_records_csv<W: Write>(s: &StudySummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &s.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<replicates>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(m: usize) -> HospitalParams {
        HospitalParams::draw(m, 5)
    }

    #[test]
    fn hyperparameter_draw_is_reproducible() {
        assert_eq!(HospitalParams::draw(7, 1), HospitalParams::draw(7, 1));
        assert_ne!(HospitalParams::draw(7, 1), HospitalParams::draw(7, 2));
    }

    #[test]
    fn uniform_assignment_gives_equal_shares() {
        let p = params(4).with_scenario(Scenario {
            randomized_assignment: true,
            ..Default::default()
        });
        let lat = generate_latent(&p, 40_000, 3).unwrap();
        let mut counts = [0usize; 4];
        lat.z.iter().for_each(|&z| counts[z] += 1);
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn binary_outcome_thresholds_latent() {
        let p = params(3);
        let lat = generate_latent(&p, 500, 8).unwrap();
        let cont = lat.dataset(3, OutcomeKind::Continuous).unwrap();
        let bin = lat.dataset(3, OutcomeKind::Binary).unwrap();
        for (y, b) in cont.outcome().iter().zip(bin.outcome()) {
            assert_eq!(*b, (*y >= 0.0) as u8 as f64);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimulationConfig::new(300, 5, OutcomeKind::Binary, 17);
        let a = generate(&cfg, 99).unwrap();
        let b = generate(&cfg, 99).unwrap();
        assert_eq!(a.outcome(), b.outcome());
        assert_eq!(a.hospital(), b.hospital());
    }

    #[test]
    fn config_checks() {
        assert!(SimulationConfig::new(10, 1, OutcomeKind::Binary, 0).validate().is_err());
        assert!(SimulationConfig::new(3, 5, OutcomeKind::Binary, 0).validate().is_err());
        let mut c = SimulationConfig::new(30, 3, OutcomeKind::Binary, 0);
        c.hospital_params = Some(params(4));
        assert!(c.validate().is_err());
    }

    #[test]
    fn continuous_residual_is_logistic_variance() {
        let o = oracle_truth(&params(5), OutcomeKind::Continuous, 20_000, 1).unwrap();
        assert_eq!(o.omega[2], LOGISTIC_VARIANCE);
        assert!((LOGISTIC_VARIANCE - 3.28987).abs() < 1e-5);
        assert_eq!(o.se[2], 0.0);
    }

    #[test]
    fn equal_alphas_have_no_between_component() {
        let p = params(6).with_scenario(Scenario {
            zero_hospital_effect: true,
            ..Default::default()
        });
        for kind in [OutcomeKind::Continuous, OutcomeKind::Binary] {
            let o = oracle_truth(&p, kind, 20_000, 2).unwrap();
            assert!(o.omega[1].abs() < 1e-14, "{kind:?}: {}", o.omega[1]);
        }
    }

    #[test]
    fn randomized_continuous_between_component_is_alpha_spread() {
        let p = params(6).with_scenario(Scenario {
            randomized_assignment: true,
            ..Default::default()
        });
        let o = oracle_truth(&p, OutcomeKind::Continuous, 20_000, 3).unwrap();
        let mean = p.alpha.iter().sum::<f64>() / 6.0;
        let spread = p.alpha.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((o.omega[1] - spread).abs() < 1e-10);
    }

    #[test]
    fn oracle_is_deterministic_and_se_shrinks() {
        let p = params(5);
        let a = oracle_truth(&p, OutcomeKind::Binary, 100_000, 4).unwrap();
        let b = oracle_truth(&p, OutcomeKind::Binary, 100_000, 4).unwrap();
        assert_eq!(a.omega, b.omega);
        let c = oracle_truth(&p, OutcomeKind::Binary, 200_000, 4).unwrap();
        for k in 0..3 {
            let ratio = c.se[k] / a.se[k];
            assert!((0.5..0.95).contains(&ratio), "component {k}: ratio {ratio}");
        }
    }

    #[test]
    fn tiny_study_runs_and_is_reproducible() {
        let cfg = SimulationConfig::new(300, 3, OutcomeKind::Binary, 7);
        let oracle = oracle_truth(&cfg.params().unwrap(), cfg.outcome_kind, 20_000, 1).unwrap();
        let study = StudyConfig {
            replications: 4,
            ..Default::default()
        };
        let a = run_study(&cfg, &study, &oracle).unwrap();
        let b = run_study(&cfg, &study, &oracle).unwrap();
        assert_eq!(a.records.len(), 8);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.row(EffectMode::Random, "tau2").is_some());
        assert!(a.row(EffectMode::Fixed, "tau2").is_none());
        for r in &a.records {
            assert!((r.omega1 + r.omega2 + r.omega3 - r.total).abs() < 1e-10 * r.total);
        }
    }
}
