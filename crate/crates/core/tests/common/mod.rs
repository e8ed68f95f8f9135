//! Fixtures and independent reference implementations shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vardecomp::model::{expit, Dataset, OutcomeKind, RawData};

/// Random patient-level dataset. Every hospital gets at least two patients.
pub fn fixture(n: usize, m: usize, p: usize, kind: OutcomeKind, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let alpha: Vec<f64> = (0..m).map(|_| 0.8 * nrm.sample(&mut rng)).collect();
    let beta: Vec<f64> = (0..p).map(|_| 0.7 * nrm.sample(&mut rng)).collect();
    let mut covariates = vec![Vec::with_capacity(n); p];
    let mut hospital = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        let z = if i < 2 * m { i % m } else { rng.random_range(0..m) };
        let x: Vec<f64> = (0..p).map(|_| nrm.sample(&mut rng)).collect();
        let eta = -0.2 + alpha[z] + x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        let y = match kind {
            OutcomeKind::Binary => (rng.random::<f64>() < expit(eta)) as u8 as f64,
            OutcomeKind::Continuous => eta + nrm.sample(&mut rng),
        };
        for (c, v) in covariates.iter_mut().zip(&x) {
            c.push(*v);
        }
        hospital.push(format!("h{:03}", z + 1));
        outcome.push(y);
    }
    Dataset::validate(
        RawData {
            outcome,
            hospital,
            covariates,
            covariate_names: (1..=p).map(|k| format!("x{k}")).collect(),
        },
        Some(kind),
    )
    .unwrap()
}

/// Dense design `[1, hospital 2..m indicators, covariates]`.
pub fn dense_design(ds: &Dataset) -> DMatrix<f64> {
    let (n, m, p) = (ds.n(), ds.m(), ds.p());
    let q = m + p;
    DMatrix::from_fn(n, q, |i, j| {
        if j == 0 {
            1.0
        } else if j < m {
            (ds.hospital()[i] == j) as u8 as f64
        } else {
            ds.x(i)[j - m]
        }
    })
}

/// Least squares through the normal equations, solved by LU.
pub fn ols_oracle(ds: &Dataset) -> Vec<f64> {
    let x = dense_design(ds);
    let y = DVector::from_column_slice(ds.outcome());
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    xtx.lu().solve(&xty).expect("nonsingular").iter().copied().collect()
}

/// Plain Newton-Raphson for logistic regression on the dense design.
pub fn logistic_oracle(ds: &Dataset) -> Vec<f64> {
    let x = dense_design(ds);
    let y = DVector::from_column_slice(ds.outcome());
    let mut b = DVector::zeros(x.ncols());
    for _ in 0..200 {
        let eta = &x * &b;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|v| v * (1.0 - v));
        let grad = x.transpose() * (&y - &mu);
        let mut info = DMatrix::zeros(x.ncols(), x.ncols());
        for i in 0..x.nrows() {
            let row = x.row(i);
            info += w[i] * row.transpose() * row;
        }
        let step = info.lu().solve(&grad).expect("nonsingular");
        b += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    b.iter().copied().collect()
}

/// Textbook ANOVA moment estimator `(tau2, sigma2)` for a balanced one-way layout.
pub fn anova_components(ds: &Dataset) -> (f64, f64) {
    let a = ds.m();
    let r = ds.n() / a;
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
    ((msb - msw) / r as f64, msw)
}

/// Balanced continuous one-way layout with `a` groups of `r`.
pub fn balanced(a: usize, r: usize, tau: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let mut outcome = vec![];
    let mut hospital = vec![];
    for g in 0..a {
        let e = tau * nrm.sample(&mut rng);
        for _ in 0..r {
            outcome.push(1.0 + e + nrm.sample(&mut rng));
            hospital.push(format!("{}", g + 1));
        }
    }
    Dataset::validate(
        RawData {
            outcome,
            hospital,
            covariates: vec![],
            covariate_names: vec![],
        },
        Some(OutcomeKind::Continuous),
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One line per acceptance criterion, then the assertion. Written to the raw
/// stderr handle so the line survives the test harness output capture.
pub fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion:>2} [{verdict}] {title}: {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}
