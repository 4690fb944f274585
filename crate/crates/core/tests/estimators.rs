mod common;

use bihyper::estimators::{
    estimate, estimate_one_step_unrolled, BatchMode, EstimatorBatches, EstimatorKind, EstimatorSpec,
};
use bihyper::numerics::{RealMatrix, RealVector};
use bihyper::problems::{
    sample_minibatch, Batch, BilevelProblem, BilevelState, LossGrads, QuadraticBilevel, Split, SupernetConfig,
    ToySupernet,
};
use bihyper::{Error, Result};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn g(p: &dyn BilevelProblem, s: &BilevelState, spec: EstimatorSpec) -> Vec<f64> {
    estimate(p, s, &spec, &EstimatorBatches::full()).unwrap().grad_alpha.into_vec()
}

#[test]
fn scalar_hand_values() {
    let p = QuadraticBilevel::scalar();
    let at_star = scalar_state(0.5, 1.0);
    let cases = [
        (EstimatorSpec::exact_ift(0.25), -0.25),
        (EstimatorSpec::one_step_unrolled(0.25), -0.125),
        (EstimatorSpec::t1t2(0.25), -0.5),
        (EstimatorSpec::neumann(1, 0.25), -0.1875),
        (EstimatorSpec::neumann(3, 0.25), -0.234375),
        (EstimatorSpec::conjugate_gradient(1, 0.25), -0.25),
        (EstimatorSpec::truncated_reverse(2, 2, 0.25), -0.1875),
    ];
    for (spec, expected) in cases {
        let kind = spec.kind;
        assert!((g(&p, &at_star, spec)[0] - expected).abs() <= 1e-12, "{kind}");
    }
    let from_zero = scalar_state(0.0, 1.0);
    assert!((g(&p, &from_zero, EstimatorSpec::reverse_mode(2, 0.25))[0] + 0.234375).abs() <= 1e-12);
    assert!((g(&p, &from_zero, EstimatorSpec::truncated_reverse(2, 1, 0.25))[0] + 0.15625).abs() <= 1e-12);
}

#[test]
fn neumann_remainder_is_geometric() {
    let p = QuadraticBilevel::scalar();
    let s = scalar_state(0.5, 1.0);
    for k in 0..25 {
        let err = (g(&p, &s, EstimatorSpec::neumann(k, 0.25))[0] + 0.25).abs();
        assert!((err - 0.25 * 0.5f64.powi(k as i32 + 1)).abs() <= 1e-15);
    }
}

#[test]
fn reverse_single_step_matches_one_step_at_first_iterate() {
    // on a quadratic the mixed block is constant, so differentiating one
    // inner step equals the one-step formula with ∂L2/∂w taken at w1
    let q = QuadraticBilevel::preset_10d();
    let gamma = 0.4;
    for s in random_states(&q, 5, 21) {
        let rev = g(&q, &s, EstimatorSpec::reverse_mode(1, gamma));
        let grad = q.inner_grads(&s.w, &s.alpha, None).unwrap().grad_w;
        let w1 = s.w.axpy(-gamma, &grad).unwrap();
        let one = g(&q, &s.with_w(w1), EstimatorSpec::one_step_unrolled(gamma));
        assert!(max_abs_diff(&rev, &one) <= 1e-10);
    }
}

#[test]
fn reverse_converges_to_oracle_from_anywhere() {
    let q = QuadraticBilevel::preset_10d();
    let gamma = 1.0 / quadratic_constants(&q).1;
    for s in random_states(&q, 3, 4) {
        let (_, oracle) = quadratic_oracle(&q, s.alpha.as_slice());
        let r = g(&q, &s, EstimatorSpec::reverse_mode(400, gamma));
        assert!(max_abs_diff(&r, &oracle) <= 1e-8);
    }
}

#[test]
fn identity_hessian_makes_t1t2_exact() {
    let a = RealMatrix::identity(3);
    let b = RealMatrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.0, 1.0]]).unwrap();
    let q = QuadraticBilevel::new(a, b, v(&[0.2, -1.0, 0.4]), 0.3).unwrap();
    let s = BilevelState::new(v(&[0.1, 0.2, 0.3]), v(&[1.0, -2.0]));
    let t = g(&q, &s, EstimatorSpec::t1t2(0.5));
    let e = g(&q, &s, EstimatorSpec::exact_ift(0.5));
    assert!(max_abs_diff(&t, &e) <= 1e-14);
}

#[test]
fn zero_learning_rate_is_rejected_not_silently_ignored() {
    let q = QuadraticBilevel::scalar();
    let r = estimate(&q, &scalar_state(0.5, 1.0), &EstimatorSpec::one_step_unrolled(0.0), &EstimatorBatches::full());
    assert_eq!(r.unwrap_err(), Error::Config("gamma must be > 0".into()));
}

#[test]
fn tiny_learning_rate_approaches_partial_derivative() {
    let q = QuadraticBilevel::scalar();
    let r = g(&q, &scalar_state(0.5, 1.0), EstimatorSpec::one_step_unrolled(1e-300));
    // ∂L2/∂α = λα = 0 for the scalar problem, so only the O(γ) term remains
    assert!(r[0].abs() <= 1e-299);
}

#[test]
fn stochastic_full_batches_bitwise_equal_neumann() {
    let net = ToySupernet::new(SupernetConfig::default());
    let s = net.initial_state(5);
    let spec = EstimatorSpec::stochastic_neumann(3, 0.2, 32, 32);
    let full = EstimatorBatches::new(Batch::full(Split::Val, 256), Batch::full(Split::Train, 256));
    let a = estimate(&net, &s, &spec, &full).unwrap();
    let b = estimate(&net, &s, &EstimatorSpec::neumann(3, 0.2), &EstimatorBatches::full()).unwrap();
    assert!(a.grad_alpha.bit_eq(&b.grad_alpha));
}

#[test]
fn stochastic_on_quadratic_ignores_batches() {
    let q = QuadraticBilevel::preset_10d();
    let s = q.initial_state(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = EstimatorSpec::stochastic_neumann(2, 0.4, 8, 8);
    let i = sample_minibatch(&q, Split::Val, 8, &mut rng).unwrap();
    let j = sample_minibatch(&q, Split::Train, 8, &mut rng).unwrap();
    let a = estimate(&q, &s, &spec, &EstimatorBatches::new(i, j)).unwrap();
    let b = estimate(&q, &s, &EstimatorSpec::neumann(2, 0.4), &EstimatorBatches::full()).unwrap();
    assert!(a.grad_alpha.bit_eq(&b.grad_alpha));
}

#[test]
fn stochastic_is_deterministic_given_batches() {
    let net = ToySupernet::new(SupernetConfig::default());
    let s = net.initial_state(5);
    let spec = EstimatorSpec::stochastic_neumann(2, 0.2, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let i = sample_minibatch(&net, Split::Val, 16, &mut rng).unwrap();
    let j = sample_minibatch(&net, Split::Train, 16, &mut rng).unwrap();
    let batches = EstimatorBatches::new(i, j);
    let a = estimate(&net, &s, &spec, &batches).unwrap();
    let b = estimate(&net, &s, &spec, &batches).unwrap();
    assert!(a.grad_alpha.bit_eq(&b.grad_alpha));
}

#[test]
fn wrong_split_batch_is_rejected() {
    let net = ToySupernet::new(SupernetConfig::default());
    let s = net.initial_state(5);
    let spec = EstimatorSpec::stochastic_neumann(1, 0.2, 4, 4);
    let swapped = EstimatorBatches::new(Batch::full(Split::Train, 4), Batch::full(Split::Val, 4));
    assert!(matches!(estimate(&net, &s, &spec, &swapped), Err(Error::Contract(_))));
}

#[test]
fn exact_ift_on_supernet_assembles_dense_hessian() {
    let net = ToySupernet::new(SupernetConfig::default());
    let s = net.initial_state(1);
    let e = estimate(&net, &s, &EstimatorSpec::exact_ift(0.1), &EstimatorBatches::full());
    // the supernet Hessian at a random point is generally indefinite but nonsingular
    match e {
        Ok(est) => assert_eq!(est.hvp_count, net.w_dim()),
        Err(Error::Singular { .. }) => {}
        Err(other) => panic!("unexpected {other}"),
    }
}

#[test]
fn kinds_parse_and_report_valid_names() {
    assert_eq!("cg".parse::<EstimatorKind>().unwrap(), EstimatorKind::ConjugateGradient);
    let msg = "newton".parse::<EstimatorKind>().unwrap_err().to_string();
    for k in EstimatorKind::ALL {
        assert!(msg.contains(k.as_str()));
    }
}

#[test]
fn estimator_spec_validation() {
    assert!(EstimatorSpec::stochastic_neumann(2, 0.1, 0, 3).validate().is_err());
    let mut full_stochastic = EstimatorSpec::stochastic_neumann(2, 0.1, 3, 3);
    full_stochastic.batch_mode = BatchMode::Full;
    assert!(full_stochastic.validate().is_err());
    assert!(EstimatorSpec::conjugate_gradient(0, 0.1).validate().is_err());
    assert!(EstimatorSpec::reverse_mode(0, 0.1).validate().is_err());
    let net = ToySupernet::new(SupernetConfig::default());
    assert!(EstimatorSpec::stochastic_neumann(1, 0.1, 300, 3).validate_for(&net).is_err());
}

/// `L1 = ½ wᵀ diag(d) w − αᵀw` with an arbitrary (possibly indefinite) diagonal.
struct Diagonal {
    d: Vec<f64>,
}

impl BilevelProblem for Diagonal {
    fn name(&self) -> &str {
        "diagonal"
    }
    fn w_dim(&self) -> usize {
        self.d.len()
    }
    fn alpha_dim(&self) -> usize {
        self.d.len()
    }
    fn split_len(&self, _: Split) -> Option<usize> {
        None
    }
    fn inner_grads(&self, w: &RealVector, alpha: &RealVector, _: Option<&Batch>) -> Result<LossGrads> {
        let gw: Vec<f64> = (0..w.len()).map(|i| self.d[i] * w[i] - alpha[i]).collect();
        let loss = (0..w.len()).map(|i| 0.5 * self.d[i] * w[i] * w[i] - alpha[i] * w[i]).sum();
        Ok(LossGrads {
            loss,
            grad_w: RealVector::new(gw)?,
            grad_alpha: w.scale(-1.0)?,
        })
    }
    fn outer_grads(&self, w: &RealVector, alpha: &RealVector, _: Option<&Batch>) -> Result<LossGrads> {
        Ok(LossGrads {
            loss: 0.5 * w.dot(w)?,
            grad_w: w.clone(),
            grad_alpha: RealVector::zeros(alpha.len()),
        })
    }
    fn hvp_inner_ww(&self, _: &RealVector, _: &RealVector, v: &RealVector, _: Option<&Batch>) -> Result<RealVector> {
        RealVector::new((0..v.len()).map(|i| self.d[i] * v[i]).collect())
    }
}

#[test]
fn cg_breakdown_on_indefinite_hessian() {
    let p = Diagonal { d: vec![1.0, -1.0] };
    let s = BilevelState::new(v(&[1.0, 1.0]), v(&[0.0, 0.0]));
    let r = estimate(&p, &s, &EstimatorSpec::conjugate_gradient(2, 0.1), &EstimatorBatches::full());
    assert!(matches!(r, Err(Error::CgBreakdown { iteration: 0, .. })));
}

#[test]
fn exact_ift_singular_hessian() {
    let p = Diagonal { d: vec![1.0, 0.0] };
    let s = BilevelState::new(v(&[1.0, 1.0]), v(&[0.0, 0.0]));
    let r = estimate(&p, &s, &EstimatorSpec::exact_ift(0.1), &EstimatorBatches::full());
    assert!(matches!(r, Err(Error::Singular { .. })));
}

#[test]
fn one_step_direct_call_matches_dispatch() {
    let q = QuadraticBilevel::preset_10d();
    let s = q.initial_state(3);
    let spec = EstimatorSpec::one_step_unrolled(0.3);
    let a = estimate_one_step_unrolled(&q, &s, &spec, &EstimatorBatches::full()).unwrap();
    let b = estimate(&q, &s, &spec, &EstimatorBatches::full()).unwrap();
    assert!(a.grad_alpha.bit_eq(&b.grad_alpha));
    assert_eq!(a.grad_eval_count, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neumann_zero_equals_one_step(seed in 0u64..100_000, gamma in 0.01f64..0.3) {
        let q = QuadraticBilevel::random(6, 3, (0.5, 3.0), 0.2, seed);
        let s = &random_states(&q, 1, seed)[0];
        let a = g(&q, s, EstimatorSpec::neumann(0, gamma));
        let b = g(&q, s, EstimatorSpec::one_step_unrolled(gamma));
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn cg_full_dimension_matches_oracle(seed in 0u64..100_000, n in 1usize..9) {
        let q = QuadraticBilevel::random(n, 2, (0.5, 3.0), 0.1, seed);
        let alpha = &random_states(&q, 1, seed)[0].alpha;
        let (w_star, oracle) = quadratic_oracle(&q, alpha.as_slice());
        let s = BilevelState::new(v(&w_star), alpha.clone());
        let cg = g(&q, &s, EstimatorSpec::conjugate_gradient(n, 0.1));
        prop_assert!(max_abs_diff(&cg, &oracle) <= 1e-8);
    }

    #[test]
    fn descent_direction_at_inner_optimum(seed in 0u64..100_000, k in 0usize..6) {
        let q = QuadraticBilevel::preset_10d();
        let gamma = 1.0 / quadratic_constants(&q).1;
        let alpha = &random_states(&q, 1, seed)[0].alpha;
        let (w_star, exact) = quadratic_oracle(&q, alpha.as_slice());
        prop_assume!(norm(&exact) > 1e-8);
        let s = BilevelState::new(v(&w_star), alpha.clone());
        let est = g(&q, &s, EstimatorSpec::neumann(k, gamma));
        let dot: f64 = est.iter().zip(&exact).map(|(a, b)| a * b).sum();
        prop_assert!(dot > 0.0);
    }

    #[test]
    fn retained_equal_to_t_is_full_reverse(seed in 0u64..100_000, t in 1usize..10) {
        let q = QuadraticBilevel::preset_10d();
        let s = &random_states(&q, 1, seed)[0];
        let a = g(&q, s, EstimatorSpec::reverse_mode(t, 0.4));
        let b = g(&q, s, EstimatorSpec::truncated_reverse(t, t, 0.4));
        prop_assert!(max_abs_diff(&a, &b) == 0.0);
    }
}
