//! Conventional baseline: indirectly standardized hospital rates pooled by a
//! DerSimonian-Laird random-effects meta-analysis.

use std::io::Write;

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glm::{fit_glm_with, GlmFit, GlmOptions};
use crate::linalg::compensated_sum;
use crate::model::{Dataset, LinkFunction, OutcomeKind};

#[derive(Debug, Clone, Serialize)]
pub struct HospitalQi {
    pub hospital: String,
    pub volume: usize,
    pub observed: f64,
    pub expected: f64,
    /// Indirectly standardized rate `p * O / E`.
    pub qi: f64,
    /// Within-hospital sampling variance of `qi`.
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetaResult {
    pub tau2: f64,
    pub q: f64,
    pub i2: f64,
    pub df: usize,
    /// Inverse-variance weighted mean of the hospital estimates.
    pub pooled: f64,
    pub hospitals: usize,
}

/// Case-mix-only logistic model used for the expected counts.
pub fn casemix_fit(ds: &Dataset) -> Result<GlmFit> {
    fit_glm_with(ds, &GlmOptions::casemix_only(LinkFunction::Logit))
}

/// Indirectly standardized rates. Hospitals with a zero expected count are
/// skipped with a warning.
pub fn indirect_qi(ds: &Dataset, casemix: &GlmFit) -> Result<Vec<HospitalQi>> {
    if ds.kind() != OutcomeKind::Binary {
        return Err(Error::InvalidData("indirect standardization needs a binary outcome".into()));
    }
    if casemix.hospital_terms {
        return Err(Error::Config("expected counts need a fit without hospital terms".into()));
    }
    let fit = casemix;
    let y = ds.outcome();
    let overall = compensated_sum(y.iter().copied()) / ds.n() as f64;
    let m = ds.m();
    let mut obs = vec![Vec::new(); m];
    let mut exp = vec![Vec::new(); m];
    let mut bin = vec![Vec::new(); m];
    for i in 0..ds.n() {
        let z = ds.hospital()[i];
        let pi = fit.predict_mu(0, ds.x(i))?;
        obs[z].push(y[i]);
        exp[z].push(pi);
        bin[z].push(pi * (1.0 - pi));
    }
    let mut out = Vec::with_capacity(m);
    for z in 0..m {
        let o = compensated_sum(obs[z].iter().copied());
        let e = compensated_sum(exp[z].iter().copied());
        if !(e > 0.0) {
            warn!("hospital {} has zero expected count; excluded", ds.hospital_labels()[z]);
            continue;
        }
        out.push(HospitalQi {
            hospital: ds.hospital_labels()[z].clone(),
            volume: obs[z].len(),
            observed: o,
            expected: e,
            qi: overall * o / e,
            variance: overall * overall / (e * e) * compensated_sum(bin[z].iter().copied()),
        });
    }
    Ok(out)
}

/// DerSimonian-Laird moment estimator of the between-hospital variance.
pub fn dersimonian_laird(qis: &[HospitalQi]) -> Result<MetaResult> {
    let est: Vec<f64> = qis.iter().map(|h| h.qi).collect();
    let var: Vec<f64> = qis.iter().map(|h| h.variance).collect();
    dersimonian_laird_raw(&est, &var)
}

/// Same estimator on bare estimates and sampling variances.
pub fn dersimonian_laird_raw(estimates: &[f64], variances: &[f64]) -> Result<MetaResult> {
    let k = estimates.len();
    if k < 2 || variances.len() != k {
        return Err(Error::InvalidData(format!(
            "meta-analysis needs at least two estimates with matching variances (got {k} and {})",
            variances.len()
        )));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidData(format!("within-hospital variances must be positive, got {v}")));
    }
    let w: Vec<f64> = variances.iter().map(|v| 1.0 / v).collect();
    let sw = compensated_sum(w.iter().copied());
    let sw2 = compensated_sum(w.iter().map(|x| x * x));
    let pooled = compensated_sum(w.iter().zip(estimates).map(|(w, t)| w * t)) / sw;
    let q = compensated_sum(w.iter().zip(estimates).map(|(w, t)| w * (t - pooled) * (t - pooled)));
    let df = k - 1;
    let excess = q - df as f64;
    let tau2 = (excess / (sw - sw2 / sw)).max(0.0);
    let i2 = if q > 0.0 { (excess / q).max(0.0) } else { 0.0 };
    Ok(MetaResult {
        tau2,
        q,
        i2,
        df,
        pooled,
        hospitals: k,
    })
}

/// Standardized rates followed by the meta-analysis.
pub fn meta_baseline(ds: &Dataset) -> Result<(Vec<HospitalQi>, MetaResult)> {
    let qi = indirect_qi(ds, &casemix_fit(ds)?)?;
    let meta = dersimonian_laird(&qi)?;
    Ok((qi, meta))
}

pub fn write_qi_csv<W: Write>(qi: &[HospitalQi], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for h in qi {
        w.serialize(h)?;
    }
    w.flush().map_err(|e| Error::io("<qi>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RawData;

    #[test]
    fn q_equal_to_df() {
        let r = dersimonian_laird_raw(&[0.2, 0.3, 0.4], &[0.01, 0.01, 0.01]).unwrap();
        assert!((r.q - 2.0).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert_eq!(r.tau2, 0.0);
        assert_eq!(r.i2, 0.0);
    }

    #[test]
    fn q_below_df_truncates() {
        let r = dersimonian_laird_raw(&[0.0, 0.1, 0.2], &[1.0, 1.0, 1.0]).unwrap();
        assert!(r.q < 2.0);
        assert_eq!(r.tau2, 0.0);
        assert_eq!(r.i2, 0.0);
    }

    #[test]
    fn heterogeneous_pair() {
        let r = dersimonian_laird_raw(&[0.1, 0.5], &[0.01, 0.01]).unwrap();
        assert!((r.q - 8.0).abs() < 1e-10);
        assert!((r.i2 - 0.875).abs() < 1e-12);
        assert!((r.tau2 - 0.07).abs() < 1e-12);
        assert!((r.pooled - 0.3).abs() < 1e-12);
    }

    #[test]
    fn identical_estimates() {
        let r = dersimonian_laird_raw(&[0.2; 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(r.q, 0.0);
        assert_eq!(r.tau2, 0.0);
        assert_eq!(r.i2, 0.0);
    }

    #[test]
    fn ordering_and_scale() {
        let est = [0.3, -0.2, 0.9, 0.15, 0.6];
        let var = [0.02, 0.05, 0.01, 0.04, 0.03];
        let a = dersimonian_laird_raw(&est, &var).unwrap();
        let b = dersimonian_laird_raw(&[0.6, 0.15, 0.9, -0.2, 0.3], &[0.03, 0.04, 0.01, 0.05, 0.02]).unwrap();
        assert!((a.tau2 - b.tau2).abs() < 1e-14 && (a.q - b.q).abs() < 1e-12);
        let c = 3.0;
        let scaled = dersimonian_laird_raw(&est.map(|t| t * c), &var.map(|v| v * c * c)).unwrap();
        assert!((scaled.tau2 - c * c * a.tau2).abs() < 1e-12);
        assert!((scaled.q - a.q).abs() < 1e-10);
        assert!((scaled.i2 - a.i2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(dersimonian_laird_raw(&[1.0], &[1.0]).is_err());
        assert!(dersimonian_laird_raw(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(dersimonian_laird_raw(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn hand_computed_rates_without_covariates() {
        // With no covariates every predicted risk equals the overall rate p = 3/8.
        let ds = Dataset::validate(
            RawData {
                outcome: vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
                hospital: ["a", "a", "a", "a", "b", "b", "b", "b"].map(String::from).to_vec(),
                covariates: vec![],
                covariate_names: vec![],
            },
            None,
        )
        .unwrap();
        let qi = indirect_qi(&ds, &casemix_fit(&ds).unwrap()).unwrap();
        let p = 3.0 / 8.0;
        assert!((qi[0].expected - 4.0 * p).abs() < 1e-9);
        assert!((qi[0].qi - p * 1.0 / (4.0 * p)).abs() < 1e-9);
        assert!((qi[1].qi - p * 2.0 / (4.0 * p)).abs() < 1e-9);
        let v = p * p / (16.0 * p * p) * 4.0 * p * (1.0 - p);
        assert!((qi[0].variance - v).abs() < 1e-9);
    }

    #[test]
    fn continuous_outcome_rejected() {
        let ds = Dataset::validate(
            RawData {
                outcome: vec![0.5, 1.5, 2.0],
                hospital: vec!["1".into(), "2".into(), "2".into()],
                covariates: vec![],
                covariate_names: vec![],
            },
            None,
        )
        .unwrap();
        let casemix = GlmFit::from_parts(LinkFunction::Logit, 0.0, &[0.0, 0.0], &[], None);
        assert!(indirect_qi(&ds, &casemix).is_err());
        assert!(casemix_fit(&ds).is_err());
    }
}
