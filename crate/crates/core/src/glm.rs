//! Fixed-effect linear and logistic regression with hospital indicators.
//!
//! Coefficient layout: `[alpha0, alpha_2 .. alpha_m, beta_1 .. beta_p]`, where the
//! hospital block is present only when the model includes hospital terms.
//! The identity link is solved in one least-squares step; the logit link by
//! iteratively reweighted least squares with step halving.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, SpdFactor};
use crate::model::{log1pexp, Dataset, LinkFunction, OutcomeKind};

pub(crate) const MAX_ITER: usize = 100;
pub(crate) const REL_LL_TOL: f64 = 1e-10;
pub(crate) const GRAD_TOL: f64 = 1e-8;
/// Coefficient norm above which a fit is flagged as (quasi-)separated.
pub(crate) const SEPARATION_NORM: f64 = 1e4;
/// Linear predictors beyond this put fitted probabilities within ~1e-13 of 0 or 1.
pub(crate) const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub link: LinkFunction,
    /// Include indicators for hospitals 2..m. Off for case-mix-only fits.
    pub hospital_terms: bool,
    pub max_iter: usize,
}

impl GlmOptions {
    pub fn new(link: LinkFunction) -> Self {
        GlmOptions {
            link,
            hospital_terms: true,
            max_iter: MAX_ITER,
        }
    }

    pub fn casemix_only(link: LinkFunction) -> Self {
        GlmOptions {
            hospital_terms: false,
            ..Self::new(link)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub names: Vec<String>,
    pub link: LinkFunction,
    pub hospital_terms: bool,
    m: usize,
    p: usize,
    /// Covariance of the coefficient estimator (inverse observed information).
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    /// Residual variance (identity link only).
    pub sigma2: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the coefficients drift towards infinity (complete or quasi-separation).
    pub separation: bool,
    pub log_likelihood: f64,
}

/// One design row as sparse `(column, value)` pairs.
struct DesignRows<'a> {
    ds: &'a Dataset,
    hospital_terms: bool,
}

impl DesignRows<'_> {
    fn q(&self) -> usize {
        1 + self.hospital_offset_count() + self.ds.p()
    }

    fn hospital_offset_count(&self) -> usize {
        if self.hospital_terms {
            self.ds.m() - 1
        } else {
            0
        }
    }

    fn for_each<F: FnMut(usize, f64)>(&self, i: usize, mut f: F) {
        f(0, 1.0);
        let h = self.ds.hospital()[i];
        if self.hospital_terms && h > 0 {
            f(h, 1.0);
        }
        let base = 1 + self.hospital_offset_count();
        for (k, &x) in self.ds.x(i).iter().enumerate() {
            f(base + k, x);
        }
    }

    fn eta(&self, i: usize, coef: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        self.for_each(i, |j, v| s += coef[j] * v);
        s
    }

    fn names(&self) -> Vec<String> {
        let mut names = vec!["(intercept)".to_string()];
        if self.hospital_terms {
            for label in &self.ds.hospital_labels()[1..] {
                names.push(format!("hospital[{label}]"));
            }
        }
        names.extend(self.ds.covariate_names().iter().cloned());
        names
    }

    /// `X' W X` and `X' W r` for per-row weights and working responses.
    fn weighted_cross_products(&self, w: &[f64], r: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let q = self.q();
        let mut xtwx = DMatrix::zeros(q, q);
        let mut xtwr = DVector::zeros(q);
        let mut idx: Vec<(usize, f64)> = Vec::with_capacity(q);
        for i in 0..self.ds.n() {
            idx.clear();
            self.for_each(i, |j, v| idx.push((j, v)));
            for &(a, va) in &idx {
                xtwr[a] += w[i] * va * r[i];
                for &(b, vb) in &idx {
                    if b <= a {
                        xtwx[(a, b)] += w[i] * va * vb;
                    }
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        (xtwx, xtwr)
    }
}

/// Fit with hospital indicators (reference hospital offset pinned at 0).
pub fn fit_glm(ds: &Dataset, link: LinkFunction) -> Result<GlmFit> {
    fit_glm_with(ds, &GlmOptions::new(link))
}

pub fn fit_glm_with(ds: &Dataset, opts: &GlmOptions) -> Result<GlmFit> {
    if opts.link == LinkFunction::Logit && ds.kind() != OutcomeKind::Binary {
        return Err(Error::InvalidData("logit link requires a binary outcome".into()));
    }
    let rows = DesignRows {
        ds,
        hospital_terms: opts.hospital_terms,
    };
    let names = rows.names();
    let n = ds.n();
    let ones = vec![1.0; n];
    let (xtx, xty) = rows.weighted_cross_products(&ones, ds.outcome());
    let factor = SpdFactor::new(&xtx).map_err(|j| Error::RankDeficient {
        column: names[j].clone(),
    })?;
    match opts.link {
        LinkFunction::Identity => fit_identity(&rows, names, factor, &xty),
        LinkFunction::Logit => fit_logit(&rows, names, opts.max_iter),
    }
}

fn fit_identity(rows: &DesignRows, names: Vec<String>, factor: SpdFactor, xty: &DVector<f64>) -> Result<GlmFit> {
    let ds = rows.ds;
    let n = ds.n();
    let q = rows.q();
    if n <= q {
        return Err(Error::InvalidData(format!(
            "{n} observations leave no residual degrees of freedom for {q} coefficients"
        )));
    }
    let coef = factor.solve(xty);
    let rss = compensated_sum((0..n).map(|i| {
        let r = ds.outcome()[i] - rows.eta(i, &coef);
        r * r
    }));
    let sigma2 = rss / (n - q) as f64;
    let covariance = factor.inverse() * sigma2;
    let log_likelihood = if rss > 0.0 {
        let s2 = rss / n as f64;
        -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
    } else {
        f64::INFINITY
    };
    Ok(GlmFit {
        coefficients: coef.as_slice().to_vec(),
        names,
        link: LinkFunction::Identity,
        hospital_terms: rows.hospital_terms,
        m: ds.m(),
        p: ds.p(),
        covariance,
        sigma2: Some(sigma2),
        converged: true,
        iterations: 1,
        separation: false,
        log_likelihood,
    })
}

/// Bernoulli log-likelihood and score at `coef`.
fn logit_ll_score(rows: &DesignRows, coef: &DVector<f64>) -> (f64, DVector<f64>) {
    let ds = rows.ds;
    let mut score = DVector::zeros(rows.q());
    let ll = compensated_sum((0..ds.n()).map(|i| {
        let eta = rows.eta(i, coef);
        let y = ds.outcome()[i];
        let resid = y - crate::model::expit(eta);
        rows.for_each(i, |j, v| score[j] += v * resid);
        y * eta - log1pexp(eta)
    }));
    (ll, score)
}

fn logit_information(rows: &DesignRows, coef: &DVector<f64>) -> DMatrix<f64> {
    let n = rows.ds.n();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let mu = crate::model::expit(rows.eta(i, coef));
            mu * (1.0 - mu)
        })
        .collect();
    rows.weighted_cross_products(&w, &vec![0.0; n]).0
}

fn fit_logit(rows: &DesignRows, names: Vec<String>, max_iter: usize) -> Result<GlmFit> {
    let ds = rows.ds;
    let q = rows.q();
    let ybar = compensated_sum(ds.outcome().iter().copied()) / ds.n() as f64;
    let mut coef = DVector::zeros(q);
    coef[0] = LinkFunction::Logit.link(ybar.clamp(1e-6, 1.0 - 1e-6));
    let (mut ll, mut score) = logit_ll_score(rows, &coef);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let info = logit_information(rows, &coef);
        let factor = SpdFactor::new(&info).map_err(|j| {
            Error::Numerical(format!("information matrix singular at `{}` during IRLS", names[j]))
        })?;
        let delta = factor.solve(&score);
        let mut step = 1.0;
        let (cand, cand_ll, cand_score) = loop {
            let cand = &coef + &delta * step;
            let (cll, cscore) = logit_ll_score(rows, &cand);
            if cll >= ll - 1e-12 * ll.abs() || step < 1e-10 {
                break (cand, cll, cscore);
            }
            step *= 0.5;
        };
        let rel = (cand_ll - ll).abs() / (ll.abs() + 1e-300);
        coef = cand;
        ll = cand_ll;
        score = cand_score;
        if rel < REL_LL_TOL || score.amax() < GRAD_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "logistic IRLS".into(),
            iterations,
        });
    }
    let info = logit_information(rows, &coef);
    let covariance = SpdFactor::new(&info)
        .map_err(|j| Error::Numerical(format!("information matrix singular at `{}`", names[j])))?
        .inverse();
    let max_eta = (0..ds.n()).map(|i| rows.eta(i, &coef).abs()).fold(0.0, f64::max);
    let separation = coef.norm() > SEPARATION_NORM || max_eta > SEPARATION_ETA;
    if separation {
        warn!("logistic fit flagged for separation (|coef| = {:.3e}, max |eta| = {:.1})", coef.norm(), max_eta);
    }
    Ok(GlmFit {
        coefficients: coef.as_slice().to_vec(),
        names,
        link: LinkFunction::Logit,
        hospital_terms: rows.hospital_terms,
        m: ds.m(),
        p: ds.p(),
        covariance,
        sigma2: None,
        converged,
        iterations,
        separation,
        log_likelihood: ll,
    })
}

impl GlmFit {
    /// Assemble a fit from known coefficients (no covariance information).
    pub fn from_parts(link: LinkFunction, alpha0: f64, hospital_offsets: &[f64], beta: &[f64], sigma2: Option<f64>) -> Self {
        let m = hospital_offsets.len().max(1);
        let mut coefficients = vec![alpha0];
        coefficients.extend_from_slice(&hospital_offsets[1.min(hospital_offsets.len())..]);
        coefficients.extend_from_slice(beta);
        let q = coefficients.len();
        let mut names = vec!["(intercept)".to_string()];
        names.extend((2..=m).map(|z| format!("hospital[{z}]")));
        names.extend((1..=beta.len()).map(|k| format!("x{k}")));
        GlmFit {
            coefficients,
            names,
            link,
            hospital_terms: true,
            m,
            p: beta.len(),
            covariance: DMatrix::zeros(q, q),
            sigma2,
            converged: true,
            iterations: 0,
            separation: false,
            log_likelihood: f64::NAN,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn alpha0(&self) -> f64 {
        self.coefficients[0]
    }

    fn hospital_block(&self) -> usize {
        if self.hospital_terms {
            self.m - 1
        } else {
            0
        }
    }

    /// Hospital offsets `alpha_1 .. alpha_m` with `alpha_1 = 0`.
    pub fn hospital_offsets(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        if self.hospital_terms {
            out[1..].copy_from_slice(&self.coefficients[1..self.m]);
        }
        out
    }

    pub fn beta(&self) -> &[f64] {
        &self.coefficients[1 + self.hospital_block()..]
    }

    pub fn linear_predictor(&self, hospital: usize, x: &[f64]) -> Result<f64> {
        if hospital >= self.m {
            return Err(Error::UnknownHospital {
                index: hospital,
                count: self.m,
            });
        }
        if x.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "covariate vector has length {}, model expects {}",
                x.len(),
                self.p
            )));
        }
        let mut eta = self.coefficients[0];
        if self.hospital_terms && hospital > 0 {
            eta += self.coefficients[hospital];
        }
        let beta = self.beta();
        eta += beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        Ok(eta)
    }

    /// Fitted mean `g^-1(alpha0 + alpha_z + beta'x)` for 0-based hospital index `hospital`.
    pub fn predict_mu(&self, hospital: usize, x: &[f64]) -> Result<f64> {
        Ok(self.link.inverse(self.linear_predictor(hospital, x)?))
    }

    /// Score vector of the log-likelihood at the fitted coefficients.
    pub fn score(&self, ds: &Dataset) -> Vec<f64> {
        let rows = DesignRows {
            ds,
            hospital_terms: self.hospital_terms,
        };
        let coef = DVector::from_column_slice(&self.coefficients);
        match self.link {
            LinkFunction::Logit => logit_ll_score(&rows, &coef).1.as_slice().to_vec(),
            LinkFunction::Identity => {
                let mut score = vec![0.0; rows.q()];
                for i in 0..ds.n() {
                    let r = ds.outcome()[i] - rows.eta(i, &coef);
                    rows.for_each(i, |j, v| score[j] += v * r);
                }
                score
            }
        }
    }
}
