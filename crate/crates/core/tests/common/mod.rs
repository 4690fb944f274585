//! Independent oracles for integration and acceptance tests.
//!
//! Nothing here calls the library's estimators, solvers or finite-difference
//! helpers; the only library calls are loss/gradient evaluations of problems.

#![allow(dead_code, clippy::needless_range_loop)]

use bihyper::numerics::RealVector;
use bihyper::problems::{
    BilevelProblem, BilevelState, QuadraticBilevel, RidgeHyperopt, SupernetConfig, ToySupernet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn v(xs: &[f64]) -> RealVector {
    RealVector::from_slice(xs).unwrap()
}

pub fn scalar_state(w: f64, alpha: f64) -> BilevelState {
    BilevelState::new(v(&[w]), v(&[alpha]))
}

/// `|a − b| ≤ abs + rel·max(|a|, |b|)` entrywise.
pub fn close(a: &[f64], b: &[f64], abs: f64, rel: f64) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= abs + rel * x.abs().max(y.abs()))
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(floor)
}

/// Gaussian elimination with partial pivoting on a copy of `m`.
pub fn gauss_solve(m: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut a: Vec<Vec<f64>> = m.iter().zip(rhs).map(|(row, &r)| {
        let mut row = row.clone();
        row.push(r);
        row
    }).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..=n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][n] - s) / a[row][row];
    }
    x
}

fn rows(m: &bihyper::numerics::RealMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// `w*(α)` and the exact hypergradient `λα + Bᵀ A⁻¹ (w* − c)` by elimination.
pub fn quadratic_oracle(p: &QuadraticBilevel, alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = rows(p.a());
    let b = rows(p.b());
    let b_alpha: Vec<f64> = b.iter().map(|r| r.iter().zip(alpha).map(|(x, y)| x * y).sum()).collect();
    let w_star = gauss_solve(&a, &b_alpha);
    let r: Vec<f64> = w_star.iter().zip(p.c().iter()).map(|(w, c)| w - c).collect();
    let x = gauss_solve(&a, &r);
    let m = alpha.len();
    let grad: Vec<f64> = (0..m)
        .map(|j| p.lambda_reg() * alpha[j] + (0..x.len()).map(|i| b[i][j] * x[i]).sum::<f64>())
        .collect();
    (w_star, grad)
}

/// Extreme eigenvalues of a symmetric matrix by power iteration on `M` and `λ_max I − M`.
pub fn sym_extreme_eigenvalues(m: &[Vec<f64>]) -> (f64, f64) {
    let n = m.len();
    let apply = |x: &[f64], shift: f64, sign: f64| -> Vec<f64> {
        (0..n)
            .map(|i| sign * (m[i].iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - shift * x[i]))
            .collect()
    };
    let power = |shift: f64, sign: f64| -> f64 {
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let y = apply(&x, shift, sign);
            lambda = x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() / x.iter().map(|p| p * p).sum::<f64>();
            let ny = norm(&y);
            if ny == 0.0 {
                break;
            }
            x = y.into_iter().map(|v| v / ny).collect();
        }
        lambda
    };
    let lambda_max = power(0.0, 1.0);
    let lambda_min = lambda_max - power(lambda_max, -1.0);
    (lambda_min, lambda_max)
}

pub fn matrix_rows(m: &bihyper::numerics::RealMatrix) -> Vec<Vec<f64>> {
    rows(m)
}

/// `(μ, λ_max, ‖B‖₂)` of a quadratic problem.
pub fn quadratic_constants(p: &QuadraticBilevel) -> (f64, f64, f64) {
    let (mu, lmax) = sym_extreme_eigenvalues(&rows(p.a()));
    let b = rows(p.b());
    let m = b[0].len();
    let btb: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| b.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let (_, s2) = sym_extreme_eigenvalues(&btb);
    (mu, lmax, s2.sqrt())
}

/// Analytic mixed product `a · ∂²L1/∂α∂w = −Bᵀa` of a quadratic problem.
pub fn quadratic_mixed(p: &QuadraticBilevel, a: &[f64]) -> Vec<f64> {
    let b = rows(p.b());
    (0..b[0].len()).map(|j| -b.iter().zip(a).map(|(r, x)| r[j] * x).sum::<f64>()).collect()
}

/// Central-difference gradients of `L1` or `L2` in both arguments, per coordinate.
pub fn fd_gradients(
    problem: &dyn BilevelProblem,
    w: &RealVector,
    alpha: &RealVector,
    outer: bool,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let loss = |w: &[f64], a: &[f64]| {
        let (w, a) = (v(w), v(a));
        if outer {
            problem.outer_grads(&w, &a, None).unwrap().loss
        } else {
            problem.inner_grads(&w, &a, None).unwrap().loss
        }
    };
    let partial = |base: &[f64], other: &[f64], first: bool| -> Vec<f64> {
        (0..base.len())
            .map(|i| {
                let mut up = base.to_vec();
                let mut dn = base.to_vec();
                up[i] += h;
                dn[i] -= h;
                let (lu, ld) = if first {
                    (loss(&up, other), loss(&dn, other))
                } else {
                    (loss(other, &up), loss(other, &dn))
                };
                (lu - ld) / (2.0 * h)
            })
            .collect()
    };
    (
        partial(w.as_slice(), alpha.as_slice(), true),
        partial(alpha.as_slice(), w.as_slice(), false),
    )
}

/// `v · ∂²L1/∂w∂w` by a fixed-step central difference of `∇_w L1`.
pub fn fd_hvp(problem: &dyn BilevelProblem, w: &RealVector, alpha: &RealVector, dir: &[f64], h: f64) -> Vec<f64> {
    let shifted = |s: f64| {
        let wp: Vec<f64> = w.iter().zip(dir).map(|(a, b)| a + s * b).collect();
        problem.inner_grads(&v(&wp), alpha, None).unwrap().grad_w.into_vec()
    };
    let (up, dn) = (shifted(h), shifted(-h));
    up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `a · ∂²L1/∂α∂w` through the dense Jacobian `∂(∇_w L1)/∂α`, built one α
/// column at a time by central differences in α.
pub fn dense_mixed_oracle(problem: &dyn BilevelProblem, w: &RealVector, alpha: &RealVector, a: &[f64], h: f64) -> Vec<f64> {
    (0..alpha.len())
        .map(|j| {
            let grad_at = |s: f64| {
                let mut ap = alpha.as_slice().to_vec();
                ap[j] += s;
                problem.inner_grads(w, &v(&ap), None).unwrap().grad_w.into_vec()
            };
            let (up, dn) = (grad_at(h), grad_at(-h));
            up.iter()
                .zip(&dn)
                .zip(a)
                .map(|((u, d), ai)| ai * (u - d) / (2.0 * h))
                .sum()
        })
        .collect()
}

pub fn gaussian(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Seeded random `(w, α)` pairs for a problem.
pub fn random_states(problem: &dyn BilevelProblem, count: usize, seed: u64) -> Vec<BilevelState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let w = gaussian(problem.w_dim(), 0.5, &mut rng);
            let a = gaussian(problem.alpha_dim(), 1.0, &mut rng);
            BilevelState::new(v(&w), v(&a))
        })
        .collect()
}

pub fn problem_suite() -> Vec<Box<dyn BilevelProblem>> {
    vec![
        Box::new(QuadraticBilevel::scalar()),
        Box::new(QuadraticBilevel::preset_10d()),
        Box::new(RidgeHyperopt::preset_20f()),
        Box::new(ToySupernet::new(SupernetConfig::default())),
    ]
}
