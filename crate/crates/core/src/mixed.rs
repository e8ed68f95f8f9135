//! Random-intercept outcome models.
//!
//! * Identity link: restricted maximum likelihood over the variance ratio
//!   `lambda = tau2 / sigma2` (profiled, one-dimensional), then generalized
//!   least squares for `(alpha0, beta)` and BLUPs for the hospital intercepts.
//! * Logit link: Laplace approximation of the marginal likelihood, maximized
//!   over `(alpha0, beta, log tau2)` by damped Newton steps; the inner problem
//!   finds each hospital's conditional mode. Hospital intercepts are reported
//!   as those conditional modes.
//!
//! `tau2` is searched on the log scale with a lower boundary of `1e-10`; a
//! boundary optimum is reported as `tau2 = 0` with zero intercepts.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glm::{fit_glm_with, GlmOptions};
use crate::linalg::{brent_maximize, compensated_sum, SpdFactor};
use crate::model::{expit, log1pexp, Dataset, LinkFunction, OutcomeKind};

pub const TAU2_FLOOR: f64 = 1e-10;
const TAU2_CEIL: f64 = 1e8;
const OUTER_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, Default)]
pub struct MixedOptions {
    /// Hold `tau2` at this value instead of estimating it.
    pub fixed_tau2: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MixedFit {
    pub alpha0: f64,
    pub beta: Vec<f64>,
    pub tau2: f64,
    /// Residual variance (identity link only).
    pub sigma2: Option<f64>,
    /// Predicted hospital intercepts `alpha_1 .. alpha_m`.
    pub eb_intercepts: Vec<f64>,
    pub link: LinkFunction,
    pub converged: bool,
    pub iterations: usize,
    pub at_boundary: bool,
    /// REML log-likelihood (identity) or Laplace log-likelihood (logit) at the optimum.
    pub objective: f64,
    /// Likelihood-ratio statistic against `tau2 = 0` (raw, no boundary correction).
    pub lr_statistic: f64,
    /// Objective after each outer iteration (logit link).
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl MixedFit {
    pub fn m(&self) -> usize {
        self.eb_intercepts.len()
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Fitted mean with the hospital intercept replaced by its prediction.
    pub fn predict_mu(&self, hospital: usize, x: &[f64]) -> Result<f64> {
        if hospital >= self.m() {
            return Err(Error::UnknownHospital {
                index: hospital,
                count: self.m(),
            });
        }
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "covariate vector has length {}, model expects {}",
                x.len(),
                self.p()
            )));
        }
        let eta = self.alpha0 + self.eb_intercepts[hospital] + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        Ok(self.link.inverse(eta))
    }
}

pub fn fit_random_intercept(ds: &Dataset, link: LinkFunction) -> Result<MixedFit> {
    fit_random_intercept_with(ds, link, &MixedOptions::default())
}

pub fn fit_random_intercept_with(ds: &Dataset, link: LinkFunction, opts: &MixedOptions) -> Result<MixedFit> {
    if ds.m() < 2 {
        return Err(Error::InvalidData("random-intercept model needs at least 2 hospitals".into()));
    }
    if let Some(t) = opts.fixed_tau2 {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!("fixed tau2 must be positive, got {t}")));
        }
    }
    match link {
        LinkFunction::Identity => reml::fit(ds, opts),
        LinkFunction::Logit => {
            if ds.kind() != OutcomeKind::Binary {
                return Err(Error::InvalidData("logit link requires a binary outcome".into()));
            }
            laplace::fit(ds, opts)
        }
    }
}

mod reml {
    use super::*;

    /// Per-hospital sufficient statistics for `X = [1, x]`.
    struct Cluster {
        n: f64,
        s: DVector<f64>,
        u: f64,
    }

    pub(super) struct Reml {
        clusters: Vec<Cluster>,
        xtx: DMatrix<f64>,
        xty: DVector<f64>,
        yty: f64,
        n: f64,
        k: usize,
    }

    pub(super) struct Eval {
        pub loglik: f64,
        pub beta: DVector<f64>,
        /// `r' V_lambda^-1 r`
        pub quad: f64,
        pub logdet_v: f64,
        pub logdet_m: f64,
    }

    impl Reml {
        pub fn new(ds: &Dataset) -> Result<Self> {
            let k = 1 + ds.p();
            let mut clusters: Vec<Cluster> = (0..ds.m())
                .map(|_| Cluster {
                    n: 0.0,
                    s: DVector::zeros(k),
                    u: 0.0,
                })
                .collect();
            let mut xtx = DMatrix::zeros(k, k);
            let mut xty = DVector::zeros(k);
            let mut row = DVector::zeros(k);
            for i in 0..ds.n() {
                row[0] = 1.0;
                for (j, &v) in ds.x(i).iter().enumerate() {
                    row[j + 1] = v;
                }
                let y = ds.outcome()[i];
                let c = &mut clusters[ds.hospital()[i]];
                c.n += 1.0;
                c.s += &row;
                c.u += y;
                xtx += &row * row.transpose();
                xty += &row * y;
            }
            let yty = compensated_sum(ds.outcome().iter().map(|y| y * y));
            let mut names = vec!["(intercept)".to_string()];
            names.extend(ds.covariate_names().iter().cloned());
            SpdFactor::new(&xtx).map_err(|j| Error::RankDeficient { column: names[j].clone() })?;
            if ds.n() <= k {
                return Err(Error::InvalidData("no residual degrees of freedom".into()));
            }
            Ok(Reml {
                clusters,
                xtx,
                xty,
                yty,
                n: ds.n() as f64,
                k,
            })
        }

        /// Weighted cross products at variance ratio `lambda`.
        fn eval_parts(&self, lambda: f64) -> Result<(SpdFactor, DVector<f64>, f64, f64)> {
            let mut m = self.xtx.clone();
            let mut b = self.xty.clone();
            let mut yvy = self.yty;
            let mut logdet_v = 0.0;
            for c in &self.clusters {
                let w = lambda / (1.0 + lambda * c.n);
                m -= &c.s * c.s.transpose() * w;
                b -= &c.s * (w * c.u);
                yvy -= w * c.u * c.u;
                logdet_v += (lambda * c.n).ln_1p();
            }
            let f = SpdFactor::new(&m).map_err(|_| Error::Numerical("GLS cross-product matrix singular".into()))?;
            Ok((f, b, yvy, logdet_v))
        }

        /// Restricted log-likelihood at `(lambda, sigma2)`; `sigma2 = None` profiles it out.
        pub fn eval(&self, lambda: f64, sigma2: Option<f64>) -> Result<Eval> {
            let (f, b, yvy, logdet_v) = self.eval_parts(lambda)?;
            let beta = f.solve(&b);
            let quad = (yvy - b.dot(&beta)).max(0.0);
            let logdet_m = f.log_det();
            let dof = self.n - self.k as f64;
            let two_pi = 2.0 * std::f64::consts::PI;
            let loglik = match sigma2 {
                None => {
                    let s2 = quad / dof;
                    -0.5 * (dof * ((two_pi * s2).ln() + 1.0) + logdet_v + logdet_m)
                }
                Some(s2) => -0.5 * (dof * (two_pi * s2).ln() + logdet_v + logdet_m + quad / s2),
            };
            Ok(Eval {
                loglik,
                beta,
                quad,
                logdet_v,
                logdet_m,
            })
        }

        pub fn dof(&self) -> f64 {
            self.n - self.k as f64
        }

        pub fn blups(&self, lambda: f64, beta: &DVector<f64>) -> Vec<f64> {
            self.clusters
                .iter()
                .map(|c| lambda / (1.0 + lambda * c.n) * (c.u - c.s.dot(beta)))
                .collect()
        }

        pub fn total_ss(&self) -> f64 {
            let mean = self.xty[0] / self.n;
            (self.yty - self.n * mean * mean).max(0.0)
        }
    }

    pub(super) fn fit(ds: &Dataset, opts: &MixedOptions) -> Result<MixedFit> {
        let reml = Reml::new(ds)?;
        let eval_lambda = |t: f64| reml.eval(t.exp(), None).map(|e| e.loglik).unwrap_or(f64::NEG_INFINITY);
        let null = reml.eval(0.0, None)?;

        let (lambda, sigma2, at_boundary) = match opts.fixed_tau2 {
            Some(tau2) => {
                let scale = (reml.total_ss() / reml.dof()).max(1e-300);
                let obj = |ls: f64| {
                    let s2 = ls.exp();
                    reml.eval(tau2 / s2, Some(s2)).map(|e| e.loglik).unwrap_or(f64::NEG_INFINITY)
                };
                let (ls, _) = grid_then_brent(obj, (scale * 1e-12).ln(), (scale * 10.0).ln() + 1.0);
                let s2 = ls.exp();
                (tau2 / s2, s2, false)
            }
            None => {
                let lo = TAU2_FLOOR.ln();
                let (t, best) = grid_then_brent(eval_lambda, lo, TAU2_CEIL.ln());
                let at_boundary = t - lo < 1e-3 || best <= eval_lambda(lo);
                if at_boundary {
                    (0.0, null.quad / reml.dof(), true)
                } else {
                    let e = reml.eval(t.exp(), None)?;
                    (t.exp(), e.quad / reml.dof(), false)
                }
            }
        };
        let e = reml.eval(lambda, opts.fixed_tau2.map(|_| sigma2))?;
        let beta = e.beta.clone();
        let tau2 = lambda * sigma2;
        let eb = if at_boundary { vec![0.0; ds.m()] } else { reml.blups(lambda, &beta) };
        debug!(
            "REML: lambda = {lambda:.6e}, sigma2 = {sigma2:.6e}, logdet V = {:.4}, logdet M = {:.4}",
            e.logdet_v, e.logdet_m
        );
        let objective = if opts.fixed_tau2.is_some() { e.loglik } else { reml.eval(lambda, None)?.loglik };
        Ok(MixedFit {
            alpha0: beta[0],
            beta: beta.as_slice()[1..].to_vec(),
            tau2,
            sigma2: Some(sigma2),
            eb_intercepts: eb,
            link: LinkFunction::Identity,
            converged: true,
            iterations: 1,
            at_boundary,
            objective,
            lr_statistic: (2.0 * (objective - null.loglik)).max(0.0),
            trace: vec![objective],
        })
    }

    /// Coarse log-scale grid followed by Brent refinement around the best cell.
    fn grid_then_brent<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> (f64, f64) {
        const CELLS: usize = 64;
        let step = (hi - lo) / CELLS as f64;
        let values: Vec<f64> = (0..=CELLS).map(|k| f(lo + step * k as f64)).collect();
        let best = values
            .iter()
            .enumerate()
            .fold(0, |b, (k, v)| if *v > values[b] { k } else { b });
        let a = lo + step * best.saturating_sub(1) as f64;
        let b = lo + step * (best + 1).min(CELLS) as f64;
        let (x, fx) = brent_maximize(&f, a, b, 1e-12);
        if fx >= values[best] {
            (x, fx)
        } else {
            (lo + step * best as f64, values[best])
        }
    }

    #[cfg(test)]
    pub(super) fn for_tests(ds: &Dataset) -> Reml {
        Reml::new(ds).unwrap()
    }
}

mod laplace {
    use super::*;

    pub(super) struct Laplace<'a> {
        ds: &'a Dataset,
        clusters: Vec<Vec<usize>>,
        /// Number of fixed effects `1 + p`.
        k: usize,
    }

    pub(super) struct Eval {
        pub value: f64,
        /// Gradient over `(alpha0, beta, rho = log tau2)`.
        pub grad: DVector<f64>,
        pub modes: Vec<f64>,
    }

    impl<'a> Laplace<'a> {
        pub fn new(ds: &'a Dataset) -> Self {
            let mut clusters = vec![Vec::new(); ds.m()];
            for (i, &h) in ds.hospital().iter().enumerate() {
                clusters[h].push(i);
            }
            Laplace { ds, clusters, k: 1 + ds.p() }
        }

        fn covariate(&self, i: usize, j: usize) -> f64 {
            if j == 0 {
                1.0
            } else {
                self.ds.x(i)[j - 1]
            }
        }

        /// Laplace log-likelihood and its gradient at `psi`; `modes` is the warm start.
        pub fn eval(&self, psi: &DVector<f64>, modes: &[f64]) -> Eval {
            let ds = self.ds;
            let k = self.k;
            let tau2 = psi[k].exp();
            let inv_tau2 = 1.0 / tau2;
            let offset: Vec<f64> = (0..ds.n())
                .map(|i| psi[0] + (1..k).map(|j| psi[j] * ds.x(i)[j - 1]).sum::<f64>())
                .collect();
            let mut grad = DVector::zeros(k + 1);
            let mut new_modes = vec![0.0; self.clusters.len()];
            let mut parts = Vec::with_capacity(self.clusters.len());
            for (z, members) in self.clusters.iter().enumerate() {
                let f = |b: f64| {
                    compensated_sum(members.iter().map(|&i| {
                        let eta = offset[i] + b;
                        ds.outcome()[i] * eta - log1pexp(eta)
                    })) - 0.5 * b * b * inv_tau2
                };
                let mut b = modes[z];
                let mut fb = f(b);
                for _ in 0..200 {
                    let (mut g, mut h) = (-b * inv_tau2, inv_tau2);
                    for &i in members {
                        let mu = expit(offset[i] + b);
                        g += ds.outcome()[i] - mu;
                        h += mu * (1.0 - mu);
                    }
                    let delta = g / h;
                    let mut step = 1.0;
                    let (nb, nf) = loop {
                        let nb = b + step * delta;
                        let nf = f(nb);
                        if nf >= fb || step < 1e-8 {
                            break (nb, nf);
                        }
                        step *= 0.5;
                    };
                    let done = (nb - b).abs() <= 1e-13 * (1.0 + b.abs());
                    b = nb;
                    fb = nf;
                    if done {
                        break;
                    }
                }
                new_modes[z] = b;

                let mut h = inv_tau2;
                let mut sum_w_c = vec![0.0; k];
                let mut sum_wp_c = vec![0.0; k];
                let mut sum_wp = 0.0;
                for &i in members {
                    let mu = expit(offset[i] + b);
                    let w = mu * (1.0 - mu);
                    let wp = w * (1.0 - 2.0 * mu);
                    let resid = ds.outcome()[i] - mu;
                    h += w;
                    sum_wp += wp;
                    for j in 0..k {
                        let c = self.covariate(i, j);
                        grad[j] += resid * c;
                        sum_w_c[j] += w * c;
                        sum_wp_c[j] += wp * c;
                    }
                }
                for j in 0..k {
                    let db = -sum_w_c[j] / h;
                    grad[j] -= 0.5 / h * (sum_wp_c[j] + sum_wp * db);
                }
                let db_rho = b * inv_tau2 / h;
                grad[k] += 0.5 * b * b * inv_tau2 - 0.5 - 0.5 / h * (sum_wp * db_rho - inv_tau2);
                parts.push(fb - 0.5 * (tau2 * h).ln());
            }
            Eval {
                value: compensated_sum(parts),
                grad,
                modes: new_modes,
            }
        }
    }

    pub(super) fn fit(ds: &Dataset, opts: &MixedOptions) -> Result<MixedFit> {
        let problem = Laplace::new(ds);
        let k = problem.k;
        let start = fit_glm_with(ds, &GlmOptions::casemix_only(LinkFunction::Logit))?;
        let rho_lo = TAU2_FLOOR.ln();
        let rho_hi = TAU2_CEIL.ln();
        let mut psi = DVector::zeros(k + 1);
        psi[0] = start.alpha0();
        for (j, b) in start.beta().iter().enumerate() {
            psi[j + 1] = *b;
        }
        psi[k] = opts.fixed_tau2.map(f64::ln).unwrap_or(0.0);
        let rho_free = opts.fixed_tau2.is_none();

        let mut cur = problem.eval(&psi, &vec![0.0; ds.m()]);
        let mut trace = vec![cur.value];
        let mut converged = false;
        let mut iterations = 0;
        while iterations < OUTER_MAX_ITER {
            iterations += 1;
            // coordinates that may move this iteration
            let at_floor = psi[k] <= rho_lo + 1e-12 && cur.grad[k] < 0.0;
            let free: Vec<usize> = (0..k).chain((rho_free && !at_floor).then_some(k)).collect();
            let g: DVector<f64> = DVector::from_iterator(free.len(), free.iter().map(|&j| cur.grad[j]));
            if g.amax() < 1e-7 {
                converged = true;
                break;
            }
            let neg_h = numeric_neg_hessian(&problem, &psi, &cur, &free);
            let delta = damped_solve(&neg_h, &g)?;
            let mut step = 1.0;
            let mut accepted = None;
            while step >= 1e-10 {
                let mut cand = psi.clone();
                for (a, &j) in free.iter().enumerate() {
                    cand[j] += step * delta[a];
                }
                cand[k] = cand[k].clamp(rho_lo, rho_hi);
                let e = problem.eval(&cand, &cur.modes);
                if e.value.is_finite() && e.value >= cur.value {
                    accepted = Some((cand, e));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, e)) = accepted else {
                // no ascent possible along the Newton direction: stationary to rounding
                converged = g.amax() < 1e-4 * (1.0 + cur.value.abs()).sqrt();
                break;
            };
            let rel = (e.value - cur.value).abs() / (1.0 + cur.value.abs());
            psi = cand;
            cur = e;
            trace.push(cur.value);
            if rel < 1e-13 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                what: "Laplace random-intercept fit".into(),
                iterations,
            });
        }
        let at_boundary = rho_free && psi[k] <= rho_lo + 1e-6;
        let tau2 = if at_boundary { 0.0 } else { psi[k].exp() };
        let eb = if at_boundary { vec![0.0; ds.m()] } else { cur.modes.clone() };
        Ok(MixedFit {
            alpha0: psi[0],
            beta: psi.as_slice()[1..k].to_vec(),
            tau2,
            sigma2: None,
            eb_intercepts: eb,
            link: LinkFunction::Logit,
            converged,
            iterations,
            at_boundary,
            objective: cur.value,
            lr_statistic: (2.0 * (cur.value - start.log_likelihood)).max(0.0),
            trace,
        })
    }

    /// Central differences of the analytic gradient, restricted to `free`.
    fn numeric_neg_hessian(problem: &Laplace, psi: &DVector<f64>, cur: &Eval, free: &[usize]) -> DMatrix<f64> {
        let d = free.len();
        let mut h = DMatrix::zeros(d, d);
        for (a, &j) in free.iter().enumerate() {
            let step = 1e-5 * (1.0 + psi[j].abs());
            let mut plus = psi.clone();
            plus[j] += step;
            let mut minus = psi.clone();
            minus[j] -= step;
            let gp = problem.eval(&plus, &cur.modes).grad;
            let gm = problem.eval(&minus, &cur.modes).grad;
            for (b, &l) in free.iter().enumerate() {
                h[(b, a)] = -(gp[l] - gm[l]) / (2.0 * step);
            }
        }
        crate::linalg::symmetrize(&mut h);
        h
    }

    /// Solve `(H + mu I) d = g`, increasing `mu` until `H + mu I` is positive definite.
    fn damped_solve(neg_h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        let d = neg_h.nrows();
        let scale = (0..d).map(|i| neg_h[(i, i)].abs()).fold(1e-8, f64::max);
        let mut mu = 0.0;
        for _ in 0..60 {
            let mut a = neg_h.clone();
            for i in 0..d {
                a[(i, i)] += mu;
            }
            if let Ok(f) = SpdFactor::new(&a) {
                return Ok(f.solve(g));
            }
            mu = if mu == 0.0 { 1e-8 * scale } else { mu * 10.0 };
        }
        Err(Error::Numerical("could not regularize Laplace Hessian".into()))
    }

    #[cfg(test)]
    pub(super) fn objective_and_grad(ds: &Dataset, psi: &[f64]) -> (f64, Vec<f64>) {
        let lp = Laplace::new(ds);
        let e = lp.eval(&DVector::from_column_slice(psi), &vec![0.0; ds.m()]);
        (e.value, e.grad.as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::fit_glm;
    use crate::model::RawData;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn make(y: Vec<f64>, h: Vec<usize>, x: Vec<Vec<f64>>, kind: OutcomeKind) -> Dataset {
        let names = (0..x.len()).map(|k| format!("x{k}")).collect();
        Dataset::validate(
            RawData {
                outcome: y,
                hospital: h.iter().map(|v| v.to_string()).collect(),
                covariates: x,
                covariate_names: names,
            },
            Some(kind),
        )
        .unwrap()
    }

    /// Balanced one-way layout, `a` groups of `r`.
    fn balanced(a: usize, r: usize, tau: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let effects: Vec<f64> = (0..a).map(|_| tau * nrm.sample(&mut rng)).collect();
        let mut y = vec![];
        let mut h = vec![];
        for (g, e) in effects.iter().enumerate() {
            for _ in 0..r {
                y.push(2.0 + e + nrm.sample(&mut rng));
                h.push(g + 1);
            }
        }
        make(y, h, vec![], OutcomeKind::Continuous)
    }

    /// Textbook ANOVA estimator for a balanced one-way layout.
    fn anova(ds: &Dataset, a: usize, r: usize) -> (f64, f64) {
        let y = ds.outcome();
        let mut means = vec![0.0; a];
        for (i, &h) in ds.hospital().iter().enumerate() {
            means[h] += y[i] / r as f64;
        }
        let grand = y.iter().sum::<f64>() / y.len() as f64;
        let ssb: f64 = means.iter().map(|m| r as f64 * (m - grand).powi(2)).sum();
        let ssw: f64 = y.iter().zip(ds.hospital()).map(|(v, &h)| (v - means[h]).powi(2)).sum();
        let msb = ssb / (a - 1) as f64;
        let msw = ssw / (a * (r - 1)) as f64;
        (((msb - msw) / r as f64).max(0.0), msw)
    }

    #[test]
    fn balanced_reml_matches_anova() {
        for (seed, tau) in [(1u64, 1.0), (2, 0.5), (3, 2.0), (4, 0.3)] {
            let ds = balanced(8, 6, tau, seed);
            let (tau2, sigma2) = anova(&ds, 8, 6);
            let fit = fit_random_intercept(&ds, LinkFunction::Identity).unwrap();
            if tau2 > 0.0 {
                assert!((fit.tau2 - tau2).abs() < 1e-6, "seed {seed}: {} vs {tau2}", fit.tau2);
                assert!((fit.sigma2.unwrap() - sigma2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn boundary_identity_fit_reproduces_ols() {
        // group means identical by construction: ANOVA tau2 estimate is negative
        let y = vec![1.0, 3.0, 2.0, 1.5, 2.5, 2.0, 1.0, 3.0, 2.0];
        let h = vec![1, 1, 1, 2, 2, 2, 3, 3, 3];
        let x = vec![vec![0.1, 0.4, -0.3, 0.2, 0.0, 0.5, -0.1, 0.3, 0.2]];
        let ds = make(y, h, x, OutcomeKind::Continuous);
        let fit = fit_random_intercept(&ds, LinkFunction::Identity).unwrap();
        assert!(fit.at_boundary);
        assert_eq!(fit.tau2, 0.0);
        let ols = fit_glm_with(&ds, &GlmOptions::casemix_only(LinkFunction::Identity)).unwrap();
        assert!((fit.alpha0 - ols.alpha0()).abs() < 1e-8);
        assert!((fit.beta[0] - ols.beta()[0]).abs() < 1e-8);
        let a = fit.predict_mu(0, &[0.3]).unwrap();
        let b = fit.predict_mu(2, &[0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blups_shrink_on_balanced_designs() {
        let ds = balanced(10, 5, 1.0, 9);
        let fit = fit_random_intercept(&ds, LinkFunction::Identity).unwrap();
        let fe = fit_glm(&ds, LinkFunction::Identity).unwrap();
        let offs = fe.hospital_offsets();
        let mean = offs.iter().sum::<f64>() / offs.len() as f64;
        for z in 0..ds.m() {
            assert!(fit.eb_intercepts[z].abs() <= (offs[z] - mean).abs() + 1e-8);
        }
    }

    fn simulated_binary(n: usize, m: usize, tau: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let effects: Vec<f64> = (0..m).map(|_| tau * nrm.sample(&mut rng)).collect();
        let mut y = vec![];
        let mut h = vec![];
        let mut x = vec![];
        for i in 0..n {
            let z = i % m;
            let xi: f64 = nrm.sample(&mut rng);
            let p = expit(-0.3 + effects[z] + 0.8 * xi);
            y.push((rng.random::<f64>() < p) as u8 as f64);
            h.push(z + 1);
            x.push(xi);
        }
        make(y, h, vec![x], OutcomeKind::Binary)
    }

    #[test]
    fn laplace_gradient_matches_finite_differences() {
        let ds = simulated_binary(300, 6, 0.8, 3);
        let psi = [-0.2, 0.7, -0.4];
        let (_, grad) = laplace::objective_and_grad(&ds, &psi);
        for j in 0..3 {
            let h = 1e-5;
            let mut a = psi;
            a[j] += h;
            let mut b = psi;
            b[j] -= h;
            let fd = (laplace::objective_and_grad(&ds, &a).0 - laplace::objective_and_grad(&ds, &b).0) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-5 * (1.0 + fd.abs()), "coord {j}: fd {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn laplace_fit_is_monotone_and_recovers_heterogeneity() {
        let ds = simulated_binary(3000, 20, 1.0, 5);
        let fit = fit_random_intercept(&ds, LinkFunction::Logit).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(fit.tau2 > 0.3 && fit.tau2 < 3.0, "tau2 = {}", fit.tau2);
        assert!((fit.beta[0] - 0.8).abs() < 0.15);
        assert!(fit.lr_statistic > 10.0);
        for z in 0..ds.m() {
            let p = fit.predict_mu(z, &[0.4]).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn no_heterogeneity_gives_small_tau2() {
        let ds = simulated_binary(5000, 10, 0.0, 11);
        let fit = fit_random_intercept(&ds, LinkFunction::Logit).unwrap();
        assert!(fit.tau2 < 0.05, "tau2 = {}", fit.tau2);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let n = 5000;
        let x: Vec<f64> = (0..n).map(|_| nrm.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 0.5 * v + nrm.sample(&mut rng)).collect();
        let h: Vec<usize> = (0..n).map(|i| i % 10 + 1).collect();
        let ds = make(y, h, vec![x], OutcomeKind::Continuous);
        let fit = fit_random_intercept(&ds, LinkFunction::Identity).unwrap();
        assert!(fit.tau2 < 0.05, "tau2 = {}", fit.tau2);
    }

    #[test]
    fn huge_fixed_tau2_approaches_fixed_effects() {
        // The Laplace log-determinant term shifts beta by O(m/n), so keep m/n small.
        let ds = simulated_binary(6000, 3, 1.0, 21);
        let fe = fit_glm(&ds, LinkFunction::Logit).unwrap();
        let re = fit_random_intercept_with(&ds, LinkFunction::Logit, &MixedOptions { fixed_tau2: Some(1e6) }).unwrap();
        let offs = fe.hospital_offsets();
        for z in 0..ds.m() {
            let a = fe.alpha0() + offs[z];
            let b = re.alpha0 + re.eb_intercepts[z];
            assert!((a - b).abs() < 1e-3, "hospital {z}: {a} vs {b}");
        }
        assert!((fe.beta()[0] - re.beta[0]).abs() < 1e-3);

        let ds = balanced(6, 7, 1.0, 4);
        let fe = fit_glm(&ds, LinkFunction::Identity).unwrap();
        let re = fit_random_intercept_with(&ds, LinkFunction::Identity, &MixedOptions { fixed_tau2: Some(1e6) }).unwrap();
        let offs = fe.hospital_offsets();
        for z in 0..ds.m() {
            assert!((fe.alpha0() + offs[z] - re.alpha0 - re.eb_intercepts[z]).abs() < 1e-3);
        }
    }

    #[test]
    fn reml_profile_is_maximized() {
        let ds = balanced(7, 4, 0.9, 30);
        let fit = fit_random_intercept(&ds, LinkFunction::Identity).unwrap();
        let reml = reml::for_tests(&ds);
        let lam = fit.tau2 / fit.sigma2.unwrap();
        let best = reml.eval(lam, None).unwrap().loglik;
        for f in [0.9, 1.1, 0.5, 2.0] {
            assert!(reml.eval(lam * f, None).unwrap().loglik <= best + 1e-12);
        }
    }

    #[test]
    fn single_hospital_is_rejected() {
        let ds = make(vec![0.0, 1.0, 1.0], vec![1, 1, 1], vec![], OutcomeKind::Binary);
        assert!(fit_random_intercept(&ds, LinkFunction::Logit).is_err());
    }
}
