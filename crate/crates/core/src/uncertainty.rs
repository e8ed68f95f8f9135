//! Approximate posterior draws for the variance components.
//!
//! Outcome-model parameters are drawn by parametric bootstrap (outcomes
//! resampled from the fitted model at the observed hospitals and covariates,
//! then refitted); assignment-model parameters from the normal approximation
//! `N(eta_hat, V(eta_hat))`. The two are drawn independently, paired by draw
//! index, and every pair is pushed through the same table/component code as
//! the point estimate.

use std::io::Write;

use log::{info, warn};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::decomposition::{build_tables, components, Decomposition, OutcomeFit, ResidualMode};
use crate::error::{Error, Result};
use crate::linalg::symmetric_sqrt;
use crate::model::{Dataset, OutcomeKind, TotalVariance};
use crate::multinomial::AssignmentFit;
use crate::rng::{substream, Domain};

pub const DEFAULT_DRAWS: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
/// Largest tolerated share of bootstrap replicates whose refit fails.
pub const MAX_DROPPED_SHARE: f64 = 0.05;
pub const QUANTILE_RULE: &str = "linear interpolation between order statistics (h = (B-1)q)";

/// `B` draws of the free assignment parameters from `N(eta_hat, V(eta_hat))`.
pub fn draw_eta(fit: &AssignmentFit, draws: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if draws == 0 {
        return Err(Error::Config("number of draws must be at least 1".into()));
    }
    let center = fit.free_params();
    let k = center.len();
    if fit.eta_covariance.nrows() != k {
        return Err(Error::DimensionMismatch(format!(
            "assignment covariance is {} x {}, expected {k} x {k}",
            fit.eta_covariance.nrows(),
            fit.eta_covariance.ncols()
        )));
    }
    let (root, clipped) = symmetric_sqrt(&fit.eta_covariance);
    if clipped < 0.0 {
        let scale = fit.eta_covariance.diagonal().amax().max(f64::MIN_POSITIVE);
        if clipped < -1e-10 * scale {
            warn!("assignment covariance not positive semi-definite; clipped eigenvalue {clipped:.3e} to 0");
        }
    }
    Ok((0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Domain::EtaDraws, b as u64);
            let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
            &center + &root * z
        })
        .collect())
}

/// Bootstrap refits of the outcome model.
#[derive(Debug, Clone)]
pub struct ThetaDraws {
    /// Successful refits with their draw index.
    pub fits: Vec<(usize, OutcomeFit)>,
    pub requested: usize,
    pub dropped: usize,
}

/// Parametric bootstrap of the outcome model: Bernoulli resampling for binary
/// outcomes, normal resampling with the fitted residual variance otherwise.
pub fn bootstrap_theta(fit: &OutcomeFit, ds: &Dataset, draws: usize, seed: u64) -> Result<ThetaDraws> {
    if draws == 0 {
        return Err(Error::Config("number of draws must be at least 1".into()));
    }
    let fitted: Vec<f64> = (0..ds.n())
        .map(|i| fit.predict_mu(ds.hospital()[i], ds.x(i)))
        .collect::<Result<_>>()?;
    let sd = match ds.kind() {
        OutcomeKind::Binary => None,
        OutcomeKind::Continuous => Some(
            fit.sigma2()
                .ok_or_else(|| Error::Config("continuous bootstrap needs a residual variance".into()))?
                .sqrt(),
        ),
    };
    let (link, effects) = (fit.link(), fit.effects());
    let results: Vec<(usize, Result<OutcomeFit>)> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Domain::ThetaBootstrap, b as u64);
            let y: Vec<f64> = match sd {
                None => fitted
                    .iter()
                    .map(|&mu| (rng.random::<f64>() < mu.clamp(0.0, 1.0)) as u8 as f64)
                    .collect(),
                Some(s) => {
                    let nrm = Normal::new(0.0, s).expect("finite sd");
                    fitted.iter().map(|&mu| mu + nrm.sample(&mut rng)).collect()
                }
            };
            let refit = ds.with_outcome(y).and_then(|d| OutcomeFit::fit(&d, link, effects)).map(strip_covariance);
            (b, refit)
        })
        .collect();
    let mut fits = Vec::with_capacity(draws);
    let mut dropped = 0;
    for (b, r) in results {
        match r {
            Ok(f) => fits.push((b, f)),
            Err(e) => {
                dropped += 1;
                info!("bootstrap replicate {b} dropped: {e}");
            }
        }
    }
    if dropped as f64 > MAX_DROPPED_SHARE * draws as f64 {
        return Err(Error::NonConvergence {
            what: format!("parametric bootstrap ({dropped} of {draws} refits failed)"),
            iterations: draws,
        });
    }
    if dropped > 0 {
        warn!("{dropped} of {draws} bootstrap refits failed and were dropped");
    }
    Ok(ThetaDraws {
        fits,
        requested: draws,
        dropped,
    })
}

fn strip_covariance(mut f: OutcomeFit) -> OutcomeFit {
    if let OutcomeFit::Fixed(g) = &mut f {
        g.covariance = nalgebra::DMatrix::zeros(0, 0);
    }
    f
}

#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub theta_draws: Vec<OutcomeFit>,
    pub eta_draws: Vec<DVector<f64>>,
    /// `(omega1, omega2, omega3)` per retained draw.
    pub component_draws: Vec<[f64; 3]>,
    pub total: f64,
    pub seed: u64,
    pub requested: usize,
    pub dropped: usize,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.component_draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.component_draws.is_empty()
    }

    /// Components re-expressed as shares of the empirical total.
    pub fn proportion_draws(&self) -> Option<Vec<[f64; 3]>> {
        (self.total > 0.0).then(|| self.component_draws.iter().map(|c| c.map(|w| w / self.total)).collect())
    }
}

/// Recompute the components at `(theta_b, eta_b)` for `b = 1..B`.
pub fn posterior_draws(
    dec: &Decomposition,
    ds: &Dataset,
    mode: ResidualMode,
    draws: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    let theta = bootstrap_theta(&dec.outcome, ds, draws, seed)?;
    let eta = draw_eta(&dec.assignment, draws, seed)?;
    let paired: Vec<(OutcomeFit, DVector<f64>)> = theta
        .fits
        .into_iter()
        .map(|(b, f)| (f, eta[b].clone()))
        .collect();
    let component_draws = evaluate_pairs(&paired, &dec.assignment, ds, &dec.total, mode)?;
    let (theta_draws, eta_draws) = paired.into_iter().unzip();
    Ok(PosteriorDraws {
        theta_draws,
        eta_draws,
        component_draws,
        total: dec.total.value,
        seed,
        requested: draws,
        dropped: theta.dropped,
    })
}

fn evaluate_pairs(
    pairs: &[(OutcomeFit, DVector<f64>)],
    template: &AssignmentFit,
    ds: &Dataset,
    total: &TotalVariance,
    mode: ResidualMode,
) -> Result<Vec<[f64; 3]>> {
    pairs
        .par_iter()
        .map(|(theta, eta)| {
            let assignment = template.with_free_params(eta)?;
            let tables = build_tables(theta, &assignment, ds)?;
            Ok(components(&tables, total, mode)?.omega)
        })
        .collect()
}

/// Equal-tailed credible intervals for each component and proportion.
#[derive(Debug, Clone, Serialize)]
pub struct Intervals {
    pub level: f64,
    /// `[lower, upper]` for omega1, omega2, omega3.
    pub omega: [[f64; 2]; 3],
    pub proportions: Option<[[f64; 2]; 3]>,
    pub draws: usize,
    pub dropped: usize,
    pub seed: u64,
    pub quantile_rule: &'static str,
}

/// Empirical quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(lower, upper)` quantiles at `(1-level)/2` and `1-(1-level)/2`.
pub fn equal_tailed(values: &[f64], level: f64) -> Result<[f64; 2]> {
    if values.is_empty() {
        return Err(Error::InvalidData("no draws to summarize".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("credible level must lie in (0, 1), got {level}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok([quantile_sorted(&sorted, a), quantile_sorted(&sorted, 1.0 - a)])
}

pub fn credible_intervals(draws: &PosteriorDraws, level: f64) -> Result<Intervals> {
    if draws.is_empty() {
        return Err(Error::InvalidData("no posterior draws".into()));
    }
    if draws.len() < 20 {
        warn!("only {} posterior draws; interval endpoints will be crude", draws.len());
    }
    let column = |rows: &[[f64; 3]], c: usize| -> Vec<f64> { rows.iter().map(|r| r[c]).collect() };
    let mut omega = [[0.0; 2]; 3];
    for (c, slot) in omega.iter_mut().enumerate() {
        *slot = equal_tailed(&column(&draws.component_draws, c), level)?;
    }
    let proportions = match draws.proportion_draws() {
        Some(rows) => {
            let mut out = [[0.0; 2]; 3];
            for (c, slot) in out.iter_mut().enumerate() {
                *slot = equal_tailed(&column(&rows, c), level)?;
            }
            Some(out)
        }
        None => None,
    };
    Ok(Intervals {
        level,
        omega,
        proportions,
        draws: draws.len(),
        dropped: draws.dropped,
        seed: draws.seed,
        quantile_rule: QUANTILE_RULE,
    })
}

/// Raw component draws as CSV (`draw,omega1,omega2,omega3`).
pub fn write_draws_csv<W: Write>(draws: &PosteriorDraws, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["draw", "omega1", "omega2", "omega3"])?;
    for (b, c) in draws.component_draws.iter().enumerate() {
        w.write_record([b.to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<draws>", e))?;
    Ok(())
}
