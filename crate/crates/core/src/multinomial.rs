//! Multinomial logistic model for hospital assignment `P(Z = z | X)`.
//!
//! Hospital 1 (index 0) is the reference category. Each other hospital has an
//! intercept `gamma_z` and, unless its volume is below the threshold, a slope
//! vector `phi_z`. Free parameters are laid out hospital by hospital as
//! `[gamma_z, phi_z...]`, skipping the slope block of intercept-only hospitals.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glm::{GRAD_TOL, MAX_ITER, REL_LL_TOL, SEPARATION_ETA, SEPARATION_NORM};
use crate::linalg::{compensated_sum, SpdFactor};
use crate::model::Dataset;

#[derive(Debug, Clone, Serialize)]
pub struct AssignmentFit {
    m: usize,
    p: usize,
    /// `gamma_1 .. gamma_m`, with `gamma_1 = 0`.
    pub gammas: Vec<f64>,
    /// `phi_1 .. phi_m`; zero for the reference and intercept-only hospitals.
    pub phis: Vec<Vec<f64>>,
    pub intercept_only: Vec<bool>,
    /// Covariance of the free parameters (inverse observed information).
    #[serde(skip)]
    pub eta_covariance: DMatrix<f64>,
    pub volume_threshold: usize,
    pub converged: bool,
    pub iterations: usize,
    pub separation: bool,
    pub log_likelihood: f64,
}

impl AssignmentFit {
    /// Parameter-free fit for a single hospital (every patient has probability 1).
    pub fn single_hospital(p: usize) -> Self {
        AssignmentFit {
            m: 1,
            p,
            gammas: vec![0.0],
            phis: vec![vec![0.0; p]],
            intercept_only: vec![true],
            eta_covariance: DMatrix::zeros(0, 0),
            volume_threshold: 0,
            converged: true,
            iterations: 0,
            separation: false,
            log_likelihood: 0.0,
        }
    }

    /// Assemble from explicit parameters. `gammas[0]` and `phis[0]` are ignored
    /// (reference category). Hospitals whose `phi` is all zero are *not* marked
    /// intercept-only; pass `intercept_only` explicitly for that.
    pub fn from_parts(gammas: Vec<f64>, phis: Vec<Vec<f64>>, intercept_only: Vec<bool>) -> Result<Self> {
        let m = gammas.len();
        if m == 0 || phis.len() != m || intercept_only.len() != m {
            return Err(Error::DimensionMismatch("assignment parameter blocks disagree on m".into()));
        }
        let p = phis[0].len();
        if phis.iter().any(|v| v.len() != p) {
            return Err(Error::DimensionMismatch("slope vectors of unequal length".into()));
        }
        let mut fit = AssignmentFit {
            m,
            p,
            gammas,
            phis,
            intercept_only,
            eta_covariance: DMatrix::zeros(0, 0),
            volume_threshold: 0,
            converged: true,
            iterations: 0,
            separation: false,
            log_likelihood: f64::NAN,
        };
        fit.gammas[0] = 0.0;
        fit.phis[0].iter_mut().for_each(|v| *v = 0.0);
        for z in 0..m {
            if fit.intercept_only[z] {
                fit.phis[z].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let k = fit.free_len();
        fit.eta_covariance = DMatrix::zeros(k, k);
        Ok(fit)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    fn has_slopes(&self, z: usize) -> bool {
        z > 0 && !self.intercept_only[z] && self.p > 0
    }

    /// Number of free parameters.
    pub fn free_len(&self) -> usize {
        (1..self.m).map(|z| 1 + if self.has_slopes(z) { self.p } else { 0 }).sum()
    }

    pub fn free_params(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.free_len());
        for z in 1..self.m {
            v.push(self.gammas[z]);
            if self.has_slopes(z) {
                v.extend_from_slice(&self.phis[z]);
            }
        }
        DVector::from_vec(v)
    }

    /// Copy of this fit with the free parameters replaced.
    pub fn with_free_params(&self, eta: &DVector<f64>) -> Result<Self> {
        if eta.len() != self.free_len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} assignment parameters, got {}",
                self.free_len(),
                eta.len()
            )));
        }
        let mut out = self.clone();
        let mut k = 0;
        for z in 1..self.m {
            out.gammas[z] = eta[k];
            k += 1;
            if self.has_slopes(z) {
                for j in 0..self.p {
                    out.phis[z][j] = eta[k];
                    k += 1;
                }
            }
        }
        Ok(out)
    }

    /// `P(Z = z | x)` for all hospitals, written into `out` (length m).
    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.m);
        out[0] = 0.0;
        for z in 1..self.m {
            let mut s = self.gammas[z];
            if self.has_slopes(z) {
                s += self.phis[z].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            out[z] = s;
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    /// Assignment probabilities over hospitals `1..m` for covariates `x`.
    pub fn predict_assignment(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "covariate vector has length {}, model expects {}",
                x.len(),
                self.p
            )));
        }
        let mut out = vec![0.0; self.m];
        self.predict_into(x, &mut out);
        Ok(out)
    }
}

/// Evaluation state of the multinomial likelihood at one parameter value.
struct Eval {
    ll: f64,
    grad: DVector<f64>,
    /// `n x (m-1)` probabilities of the non-reference hospitals.
    probs: DMatrix<f64>,
}

struct Problem<'a> {
    ds: &'a Dataset,
    template: AssignmentFit,
    /// Column offset of each non-reference hospital's block in the free vector.
    offsets: Vec<usize>,
}

impl Problem<'_> {
    fn evaluate(&self, eta: &DVector<f64>) -> Eval {
        let ds = self.ds;
        let (n, m, p) = (ds.n(), ds.m(), ds.p());
        let fit = self.template.with_free_params(eta).expect("length checked");
        let mut probs = DMatrix::zeros(n, m - 1);
        let mut grad = DVector::zeros(eta.len());
        let mut row = vec![0.0; m];
        let ll = compensated_sum((0..n).map(|i| {
            let x = ds.x(i);
            fit.predict_into(x, &mut row);
            let zi = ds.hospital()[i];
            for z in 1..m {
                let pi = row[z];
                probs[(i, z - 1)] = pi;
                let resid = (zi == z) as u8 as f64 - pi;
                let o = self.offsets[z - 1];
                grad[o] += resid;
                if fit.has_slopes(z) {
                    for j in 0..p {
                        grad[o + 1 + j] += resid * x[j];
                    }
                }
            }
            row[zi].max(f64::MIN_POSITIVE).ln()
        }));
        Eval { ll, grad, probs }
    }

    /// Observed information over the free parameters, assembled from
    /// `P' diag(x_a x_b) P` products for each covariate pair `(a, b)`.
    fn information(&self, eval: &Eval) -> DMatrix<f64> {
        let ds = self.ds;
        let (n, m, p) = (ds.n(), ds.m(), ds.p());
        let k = self.template.free_len();
        let any_slopes = (1..m).any(|z| self.template.has_slopes(z));
        let pairs = if any_slopes { p + 1 } else { 1 };
        let xt = |i: usize, a: usize| if a == 0 { 1.0 } else { ds.x(i)[a - 1] };
        let mut info = DMatrix::zeros(k, k);
        let mut scaled = DMatrix::zeros(n, m - 1);
        for a in 0..pairs {
            for b in a..pairs {
                for i in 0..n {
                    let w = xt(i, a) * xt(i, b);
                    for c in 0..m - 1 {
                        scaled[(i, c)] = eval.probs[(i, c)] * w;
                    }
                }
                let cross = eval.probs.tr_mul(&scaled);
                let diag: Vec<f64> = (0..m - 1).map(|c| scaled.column(c).sum()).collect();
                for z in 1..m {
                    let Some(r) = self.index(z, a) else { continue };
                    for z2 in 1..m {
                        let Some(c) = self.index(z2, b) else { continue };
                        let mut v = -cross[(z - 1, z2 - 1)];
                        if z == z2 {
                            v += diag[z - 1];
                        }
                        info[(r, c)] = v;
                        info[(c, r)] = v;
                    }
                }
            }
        }
        info
    }

    fn index(&self, z: usize, a: usize) -> Option<usize> {
        let o = self.offsets[z - 1];
        if a == 0 {
            Some(o)
        } else if self.template.has_slopes(z) {
            Some(o + a)
        } else {
            None
        }
    }
}

/// Fit the assignment model by Newton's method with step halving. Hospitals
/// with fewer than `volume_threshold` patients get intercept-only terms.
pub fn fit_multinomial(ds: &Dataset, volume_threshold: usize) -> Result<AssignmentFit> {
    let (n, m, p) = (ds.n(), ds.m(), ds.p());
    if m < 2 {
        return Err(Error::InvalidData("assignment model needs at least 2 hospitals".into()));
    }
    let sizes = ds.hospital_sizes();
    let intercept_only: Vec<bool> = sizes.iter().map(|&c| c < volume_threshold).collect();
    let slopes = (1..m).filter(|&z| !intercept_only[z]).count();
    if p > 0 && slopes < 2 {
        info!(
            "volume threshold {volume_threshold} leaves {slopes} hospital(s) with slope terms; assignment model is close to intercept-only"
        );
    }
    let gammas: Vec<f64> = sizes.iter().map(|&c| (c as f64 / sizes[0] as f64).ln()).collect();
    let mut template = AssignmentFit::from_parts(gammas, vec![vec![0.0; p]; m], intercept_only)?;
    template.volume_threshold = volume_threshold;
    let mut offsets = Vec::with_capacity(m - 1);
    let mut acc = 0;
    for z in 1..m {
        offsets.push(acc);
        acc += 1 + if template.has_slopes(z) { p } else { 0 };
    }
    let problem = Problem {
        ds,
        template: template.clone(),
        offsets,
    };

    let mut eta = template.free_params();
    let mut eval = problem.evaluate(&eta);
    let mut converged = eval.grad.amax() < GRAD_TOL;
    let mut iterations = 0;
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let info = problem.information(&eval);
        let factor = SpdFactor::new(&info)
            .map_err(|j| Error::Numerical(format!("multinomial information singular at parameter {j}")))?;
        let delta = factor.solve(&eval.grad);
        let mut step = 1.0;
        let cand = loop {
            let eta_c = &eta + &delta * step;
            let e = problem.evaluate(&eta_c);
            if e.ll >= eval.ll - 1e-12 * eval.ll.abs() || step < 1e-10 {
                break (eta_c, e);
            }
            step *= 0.5;
        };
        let rel = (cand.1.ll - eval.ll).abs() / (eval.ll.abs() + 1e-300);
        eta = cand.0;
        eval = cand.1;
        converged = rel < REL_LL_TOL || eval.grad.amax() < GRAD_TOL;
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "multinomial Newton".into(),
            iterations,
        });
    }
    let info = problem.information(&eval);
    let covariance = SpdFactor::new(&info)
        .map_err(|j| Error::Numerical(format!("multinomial information singular at parameter {j}")))?
        .inverse();
    let mut fit = template.with_free_params(&eta)?;
    let max_score = (0..n)
        .map(|i| {
            let x = ds.x(i);
            (1..m)
                .map(|z| {
                    let mut s = fit.gammas[z];
                    if fit.has_slopes(z) {
                        s += fit.phis[z].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                    s.abs()
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    fit.separation = eta.norm() > SEPARATION_NORM || max_score > SEPARATION_ETA;
    if fit.separation {
        warn!("multinomial assignment fit flagged for separation (|eta| = {:.3e})", eta.norm());
    }
    fit.eta_covariance = covariance;
    fit.converged = true;
    fit.iterations = iterations;
    fit.log_likelihood = eval.ll;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_glm_with, GlmOptions};
    use crate::model::{LinkFunction, OutcomeKind, RawData};

    fn toy(n: usize, m: usize) -> Dataset {
        let x1: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let x2: Vec<f64> = (0..n).map(|i| ((i * 31) % 2) as f64).collect();
        let hospital: Vec<String> = (0..n)
            .map(|i| {
                let bias = if x1[i] > 0.3 { 1 } else { 0 };
                (((i * 13 + bias * (i % 3)) % m) + 1).to_string()
            })
            .collect();
        Dataset::validate(
            RawData {
                outcome: vec![0.0; n],
                hospital,
                covariates: vec![x1, x2],
                covariate_names: vec!["x1".into(), "x2".into()],
            },
            Some(OutcomeKind::Continuous),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let fit = AssignmentFit::from_parts(vec![0.0; 4], vec![vec![0.0; 2]; 4], vec![false; 4]).unwrap();
        assert_eq!(fit.predict_assignment(&[1.0, -3.0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn two_hospital_softmax_examples() {
        let fit = AssignmentFit::from_parts(vec![0.0, 0.0], vec![vec![0.0], vec![1.0]], vec![false; 2]).unwrap();
        assert_eq!(fit.predict_assignment(&[0.0]).unwrap(), vec![0.5, 0.5]);
        let fit = AssignmentFit::from_parts(vec![0.0, 20.0], vec![vec![0.0], vec![0.0]], vec![false; 2]).unwrap();
        let probs = fit.predict_assignment(&[0.0]).unwrap();
        // 1 / (1 + e^20)
        let expected = 2.061_153_618_190_204_4e-9;
        assert!((probs[0] - expected).abs() < 1e-20);
        assert!((probs[1] - (1.0 - expected)).abs() < 1e-15);
        let fit = AssignmentFit::from_parts(vec![0.0, 800.0], vec![vec![0.0], vec![0.0]], vec![false; 2]).unwrap();
        let probs = fit.predict_assignment(&[0.0]).unwrap();
        assert!(probs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn two_hospitals_match_binary_logistic() {
        let ds = toy(300, 2);
        let fit = fit_multinomial(&ds, 0).unwrap();
        let z2: Vec<f64> = ds.hospital().iter().map(|&h| h as f64).collect();
        let as_outcome = Dataset::from_parts(
            z2,
            vec![0; ds.n()],
            (0..ds.n()).flat_map(|i| ds.x(i).to_vec()).collect(),
            2,
            vec!["all".into()],
            vec!["x1".into(), "x2".into()],
            Some(OutcomeKind::Binary),
        )
        .unwrap();
        let logit = fit_glm_with(&as_outcome, &GlmOptions::casemix_only(LinkFunction::Logit)).unwrap();
        assert!((fit.gammas[1] - logit.alpha0()).abs() < 1e-6);
        for j in 0..2 {
            assert!((fit.phis[1][j] - logit.beta()[j]).abs() < 1e-6);
        }
        for i in 0..ds.n() {
            let p = fit.predict_assignment(ds.x(i)).unwrap();
            let q = logit.predict_mu(0, ds.x(i)).unwrap();
            assert!((p[1] - q).abs() < 1e-8);
        }
        // same covariance too
        assert!((&fit.eta_covariance - &logit.covariance).amax() < 1e-6);
    }

    #[test]
    fn no_covariates_reproduce_empirical_shares() {
        let n = 90;
        let hospital: Vec<String> = (0..n).map(|i| ((i * i) % 4).to_string()).collect();
        let ds = Dataset::validate(
            RawData {
                outcome: vec![1.0; n],
                hospital,
                covariates: vec![],
                covariate_names: vec![],
            },
            None,
        )
        .unwrap();
        let fit = fit_multinomial(&ds, 0).unwrap();
        let sizes = ds.hospital_sizes();
        let probs = fit.predict_assignment(&[]).unwrap();
        for z in 0..ds.m() {
            assert!((probs[z] - sizes[z] as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_above_n_forces_intercepts_only() {
        let ds = toy(200, 4);
        let fit = fit_multinomial(&ds, ds.n() + 1).unwrap();
        assert!(fit.intercept_only.iter().all(|&b| b));
        assert_eq!(fit.free_len(), 3);
        let sizes = ds.hospital_sizes();
        for i in [0, 17, 123] {
            let probs = fit.predict_assignment(ds.x(i)).unwrap();
            for z in 0..4 {
                assert!((probs[z] - sizes[z] as f64 / 200.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn small_hospitals_get_intercepts_only() {
        let ds = toy(400, 5);
        let sizes = ds.hospital_sizes();
        let threshold = *sizes.iter().max().unwrap();
        let fit = fit_multinomial(&ds, threshold).unwrap();
        for z in 1..5 {
            assert_eq!(fit.intercept_only[z], sizes[z] < threshold);
            if fit.intercept_only[z] {
                assert!(fit.phis[z].iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(fit.eta_covariance.nrows(), fit.free_len());
    }

    #[test]
    fn probabilities_sum_to_one_and_gradient_vanishes() {
        let ds = toy(500, 6);
        let fit = fit_multinomial(&ds, 0).unwrap();
        for i in 0..ds.n() {
            let probs = fit.predict_assignment(ds.x(i)).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(probs.iter().all(|&v| v > 0.0));
        }
        let mut template = fit.clone();
        template.eta_covariance = DMatrix::zeros(0, 0);
        let mut offsets = vec![];
        let mut acc = 0;
        for z in 1..ds.m() {
            offsets.push(acc);
            acc += 1 + if fit.has_slopes(z) { ds.p() } else { 0 };
        }
        let problem = Problem {
            ds: &ds,
            template,
            offsets,
        };
        let eval = problem.evaluate(&fit.free_params());
        assert!(eval.grad.amax() / ds.n() as f64 <= 1e-6);
    }
}
