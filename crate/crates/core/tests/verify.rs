mod common;

use bihyper::estimators::EstimatorSpec;
use bihyper::problems::{BilevelProblem, QuadraticBilevel};
use bihyper::search::{run_search, SearchConfig};
use bihyper::verify::{
    check_convergence, check_corollary2, check_descent, check_equivalences, check_theorem1_bound,
    check_unbiasedness, run_default, sample_alphas, CheckName, DEFAULT_SEED,
};
use bihyper::Error;
use common::*;

#[test]
fn every_default_check_passes() {
    for name in CheckName::ALL {
        for report in run_default(name, DEFAULT_SEED).unwrap() {
            let failing: Vec<_> = report.failing_rows().map(|r| r.case.clone()).collect();
            assert!(report.passed, "{}: {failing:?}", report.check_name);
            assert_eq!(report.passed, report.recompute_passed());
        }
    }
}

#[test]
fn descent_normalized_near_one_for_large_k() {
    let q = QuadraticBilevel::preset_10d();
    let gamma = 1.0 / quadratic_constants(&q).1;
    let r = check_descent(&q, gamma, 400, 20, 1).unwrap();
    let m = r.measured_value("min_normalized_inner_product").unwrap();
    assert!((0.99..=1.01).contains(&m), "{m}");
    let scalar = check_descent(&QuadraticBilevel::scalar(), 0.25, 30, 20, 1).unwrap();
    let m = scalar.measured_value("min_normalized_inner_product").unwrap();
    assert!((0.99..=1.01).contains(&m), "{m}");
}

#[test]
fn large_outer_rate_fails_convergence() {
    let q = QuadraticBilevel::scalar();
    let config = SearchConfig::new(EstimatorSpec::neumann(3, 0.25), 10, 10.0, 100, 0);
    match run_search(&q, &config) {
        Ok(t) => assert!(!check_convergence(&t, 10, 1e-4).unwrap().passed),
        Err(e) => assert!(!e.partial.converged()),
    }
}

#[test]
fn window_longer_than_run_is_config_error() {
    let q = QuadraticBilevel::scalar();
    let t = run_search(&q, &SearchConfig::new(EstimatorSpec::neumann(1, 0.25), 1, 0.1, 5, 0)).unwrap();
    assert!(matches!(check_convergence(&t, 6, 1e-4), Err(Error::Config(_))));
    assert!(matches!(check_convergence(&t, 0, 1e-4), Err(Error::Config(_))));
}

#[test]
fn quadratic_unbiasedness_is_exact() {
    let q = QuadraticBilevel::preset_10d();
    let s = q.initial_state(0);
    let r = check_unbiasedness(&q, &s, &EstimatorSpec::stochastic_neumann(2, 0.2, 4, 4), 10, 0).unwrap();
    assert!(r.passed);
    assert_eq!(r.measured_value("worst_z").unwrap(), 0.0);
    assert!(check_unbiasedness(&q, &s, &EstimatorSpec::neumann(2, 0.2), 10, 0).is_err());
}

#[test]
fn theorem1_fails_when_gamma_too_large() {
    let q = QuadraticBilevel::scalar();
    let alphas = vec![v(&[1.0])];
    assert!(check_theorem1_bound(&q, 3.0, &[0, 1, 2], &alphas).is_err());
    let ok = check_theorem1_bound(&q, 0.1, &(0..10).collect::<Vec<_>>(), &alphas).unwrap();
    assert!(ok.passed);
}

#[test]
fn corollary_and_equivalences_on_random_instance() {
    let q = QuadraticBilevel::random(6, 3, (0.5, 2.0), 0.1, 99);
    let gamma = 1.0 / quadratic_constants(&q).1;
    let alphas = sample_alphas(3, 4, 1.0, 5);
    assert!(check_corollary2(&q, gamma, &[0, 1, 2, 3], &alphas).unwrap().passed);
    assert!(check_equivalences(&q, gamma, &alphas).unwrap().passed);
}

#[test]
fn unknown_check_lists_valid_names() {
    let msg = "theorem9".parse::<CheckName>().unwrap_err().to_string();
    assert!(msg.contains("equivalences") && msg.contains("all"));
}
