mod common;

use common::{anova_components, balanced, fixture, logistic_oracle, max_abs_diff, ols_oracle};
use vardecomp::glm::fit_glm;
use vardecomp::mixed::fit_random_intercept;
use vardecomp::model::{LinkFunction, OutcomeKind};

#[test]
fn identity_fits_match_normal_equations() {
    for seed in 0..12u64 {
        let ds = fixture(150 + 10 * seed as usize, 3 + (seed % 4) as usize, 1 + (seed % 3) as usize, OutcomeKind::Continuous, seed);
        let fit = fit_glm(&ds, LinkFunction::Identity).unwrap();
        let d = max_abs_diff(&fit.coefficients, &ols_oracle(&ds));
        assert!(d < 1e-8, "seed {seed}: {d}");
    }
}

#[test]
fn logistic_fits_match_dense_newton() {
    for seed in 0..12u64 {
        let ds = fixture(400 + 20 * seed as usize, 2 + (seed % 5) as usize, (seed % 3) as usize, OutcomeKind::Binary, 100 + seed);
        let fit = fit_glm(&ds, LinkFunction::Logit).unwrap();
        assert!(fit.converged && !fit.separation);
        let d = max_abs_diff(&fit.coefficients, &logistic_oracle(&ds));
        assert!(d < 1e-8, "seed {seed}: {d}");
    }
}

#[test]
fn balanced_reml_matches_anova() {
    let mut checked = 0;
    for seed in 0..10u64 {
        let ds = balanced(6 + seed as usize, 5, 1.2, 500 + seed);
        let (tau2, sigma2) = anova_components(&ds);
        let fit = fit_random_intercept(&ds, LinkFunction::Identity).unwrap();
        if tau2 > 0.0 {
            assert!((fit.tau2 - tau2).abs() < 1e-6, "seed {seed}: {} vs {tau2}", fit.tau2);
            assert!((fit.sigma2.unwrap() - sigma2).abs() < 1e-6);
            checked += 1;
        } else {
            assert_eq!(fit.tau2, 0.0);
        }
    }
    assert!(checked >= 8);
}
