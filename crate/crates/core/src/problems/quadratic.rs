//! Quadratic bilevel problem with a closed-form inner solution.
//!
//! `L1(w, α) = ½ wᵀAw − wᵀBα` and `L2(w, α) = ½‖w − c‖² + ½ λ‖α‖²`, so
//! `w*(α) = A⁻¹Bα` and the exact hypergradient is `λα + Bᵀ A⁻¹ (w* − c)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_batch, check_point, Batch, BilevelProblem, LossGrads, Split};
use crate::error::{Error, Result};
use crate::numerics::{dense_solve, dot, RealMatrix, RealVector};

#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    name: String,
    a: RealMatrix,
    b: RealMatrix,
    c: RealVector,
    lambda_reg: f64,
}

impl QuadraticBilevel {
    pub fn new(a: RealMatrix, b: RealMatrix, c: RealVector, lambda_reg: f64) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return Err(Error::Dimension {
                context: "A must be square",
                expected: n,
                found: a.cols(),
            });
        }
        if b.rows() != n {
            return Err(Error::Dimension {
                context: "B rows",
                expected: n,
                found: b.rows(),
            });
        }
        if c.len() != n {
            return Err(Error::Dimension {
                context: "c length",
                expected: n,
                found: c.len(),
            });
        }
        if !a.is_symmetric(1e-12) {
            return Err(Error::contract("A must be symmetric"));
        }
        if !a.is_positive_definite() {
            return Err(Error::contract("A must be positive definite"));
        }
        if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
            return Err(Error::contract("lambda_reg must be finite and >= 0"));
        }
        Ok(Self {
            name: "quadratic".into(),
            a,
            b,
            c,
            lambda_reg,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// `A = [[2]], B = [[1]], c = [1], λ = 0`.
    pub fn scalar() -> Self {
        Self::new(
            RealMatrix::new(1, 1, vec![2.0]).unwrap(),
            RealMatrix::new(1, 1, vec![1.0]).unwrap(),
            RealVector::from_slice(&[1.0]).unwrap(),
            0.0,
        )
        .unwrap()
        .with_name("quad-scalar")
    }

    /// The `quad-10d` preset: n = 10, m = 4, spectrum of A in [0.5, 2].
    pub fn preset_10d() -> Self {
        Self::random(10, 4, (0.5, 2.0), 0.1, 20_211_010).with_name("quad-10d")
    }

    /// Random instance `A = Q diag(λ) Qᵀ` with eigenvalues evenly spaced in
    /// `eig_range`, Gaussian `B` and `c`.
    pub fn random(n: usize, m: usize, eig_range: (f64, f64), lambda_reg: f64, seed: u64) -> Self {
        assert!(n > 0 && m > 0);
        let (lo, hi) = eig_range;
        assert!(lo > 0.0 && hi >= lo);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |count: usize| -> Vec<f64> {
            (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let g = DMatrix::from_row_slice(n, n, &gauss(n * n));
        let q = g.qr().q();
        let eig: Vec<f64> = (0..n)
            .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..n).map(|k| q[(i, k)] * eig[k] * q[(j, k)]).sum();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let b = gauss(n * m);
        let c = gauss(n);
        Self::new(
            RealMatrix::new(n, n, a).unwrap(),
            RealMatrix::new(n, m, b).unwrap(),
            RealVector::new(c).unwrap(),
            lambda_reg,
        )
        .expect("constructed SPD instance")
        .with_name(format!("quad-random-{n}x{m}-{seed}"))
    }

    pub fn a(&self) -> &RealMatrix {
        &self.a
    }

    pub fn b(&self) -> &RealMatrix {
        &self.b
    }

    pub fn c(&self) -> &RealVector {
        &self.c
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    /// `w*(α) = A⁻¹Bα`.
    pub fn inner_closed_form(&self, alpha: &RealVector) -> Result<RealVector> {
        dense_solve(&self.a, &self.b.matvec(alpha)?)
    }

    /// Exact hypergradient at `w*(α)` by a dense solve.
    pub fn oracle_exact_hypergradient(&self, alpha: &RealVector) -> Result<RealVector> {
        let w_star = self.inner_closed_form(alpha)?;
        let dl2_dw = w_star.sub(&self.c)?;
        // ∂L2/∂α − (A⁻¹ ∂L2/∂w)ᵀ(−B)
        let x = dense_solve(&self.a, &dl2_dw)?;
        alpha.scale(self.lambda_reg)?.add(&self.b.transpose_matvec(&x)?)
    }

    /// Reduced outer objective `α ↦ L2(w*(α), α)`.
    pub fn reduced_objective(&self, alpha: &RealVector) -> Result<f64> {
        let w_star = self.inner_closed_form(alpha)?;
        Ok(self.outer_grads(&w_star, alpha, None)?.loss)
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn name(&self) -> &str {
        &self.name
    }

    fn w_dim(&self) -> usize {
        self.a.rows()
    }

    fn alpha_dim(&self) -> usize {
        self.b.cols()
    }

    fn split_len(&self, _split: Split) -> Option<usize> {
        None
    }

    fn inner_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads> {
        check_point(self, w, alpha)?;
        check_batch(batch, Split::Train, None)?;
        let aw = self.a.matvec(w)?;
        let b_alpha = self.b.matvec(alpha)?;
        let loss = 0.5 * dot(w, &aw)? - dot(w, &b_alpha)?;
        Ok(LossGrads {
            loss,
            grad_w: aw.sub(&b_alpha)?,
            grad_alpha: self.b.transpose_matvec(w)?.scale(-1.0)?,
        })
    }

    fn outer_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads> {
        check_point(self, w, alpha)?;
        check_batch(batch, Split::Val, None)?;
        let r = w.sub(&self.c)?;
        let loss = 0.5 * dot(&r, &r)? + 0.5 * self.lambda_reg * dot(alpha, alpha)?;
        Ok(LossGrads {
            loss,
            grad_w: r,
            grad_alpha: alpha.scale(self.lambda_reg)?,
        })
    }

    fn hvp_inner_ww(
        &self,
        w: &RealVector,
        alpha: &RealVector,
        v: &RealVector,
        batch: Option<&Batch>,
    ) -> Result<RealVector> {
        check_point(self, w, alpha)?;
        check_batch(batch, Split::Train, None)?;
        self.a.matvec(v)
    }

    fn mixed_product_analytic(&self, w: &RealVector, alpha: &RealVector, v: &RealVector) -> Result<RealVector> {
        check_point(self, w, alpha)?;
        self.b.transpose_matvec(v)?.scale(-1.0)
    }

    fn dense_inner_hessian(
        &self,
        _w: &RealVector,
        _alpha: &RealVector,
        batch: Option<&Batch>,
    ) -> Option<Result<RealMatrix>> {
        Some(check_batch(batch, Split::Train, None).map(|()| self.a.clone()))
    }

    fn as_quadratic(&self) -> Option<&QuadraticBilevel> {
        Some(self)
    }

    fn satisfies_convergence_hypotheses(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> RealVector {
        RealVector::from_slice(xs).unwrap()
    }

    #[test]
    fn scalar_inner_grads_example() {
        let p = QuadraticBilevel::scalar();
        let g = p.inner_grads(&v(&[0.5]), &v(&[1.0]), None).unwrap();
        assert_eq!(g.loss, -0.25);
        assert_eq!(g.grad_w, v(&[0.0]));
        assert_eq!(g.grad_alpha, v(&[-0.5]));
    }

    #[test]
    fn scalar_outer_grads_example() {
        let p = QuadraticBilevel::scalar();
        let g = p.outer_grads(&v(&[0.5]), &v(&[1.0]), None).unwrap();
        assert_eq!(g.loss, 0.125);
        assert_eq!(g.grad_w, v(&[-0.5]));
        assert_eq!(g.grad_alpha, v(&[0.0]));
    }

    #[test]
    fn regularizer_gradient() {
        let p = QuadraticBilevel::new(
            RealMatrix::new(1, 1, vec![2.0]).unwrap(),
            RealMatrix::new(1, 1, vec![1.0]).unwrap(),
            v(&[1.0]),
            2.0,
        )
        .unwrap();
        let g = p.outer_grads(&v(&[0.5]), &v(&[3.0]), None).unwrap();
        assert_eq!(g.grad_alpha, v(&[6.0]));
    }

    #[test]
    fn hvp_and_mixed_examples() {
        let p = QuadraticBilevel::scalar();
        let (w, a) = (v(&[0.5]), v(&[1.0]));
        assert_eq!(p.hvp_inner_ww(&w, &a, &v(&[-0.5]), None).unwrap(), v(&[-1.0]));
        assert_eq!(p.hvp_inner_ww(&w, &a, &v(&[0.0]), None).unwrap(), v(&[0.0]));
        assert_eq!(p.mixed_product_analytic(&w, &a, &v(&[-0.5])).unwrap(), v(&[0.5]));
        assert!(p.mixed_product_analytic(&w, &a, &v(&[0.0])).unwrap().is_zero());

        // B = [[1,0],[0,3]] (n = m = 2)
        let p2 = QuadraticBilevel::new(
            RealMatrix::identity(2),
            RealMatrix::diagonal(&[1.0, 3.0]).unwrap(),
            RealVector::zeros(2),
            0.0,
        )
        .unwrap();
        let z = RealVector::zeros(2);
        assert_eq!(p2.mixed_product_analytic(&z, &z, &v(&[1.0, 1.0])).unwrap(), v(&[-1.0, -3.0]));
    }

    #[test]
    fn closed_form_examples() {
        let p = QuadraticBilevel::scalar();
        assert_eq!(p.inner_closed_form(&v(&[1.0])).unwrap(), v(&[0.5]));
        assert!(p.inner_closed_form(&v(&[0.0])).unwrap().is_zero());
        assert_eq!(p.oracle_exact_hypergradient(&v(&[1.0])).unwrap(), v(&[-0.25]));
    }

    #[test]
    fn closed_form_is_stationary_for_random_instances() {
        for seed in 0..5 {
            let p = QuadraticBilevel::random(10, 4, (0.5, 2.0), 0.1, seed);
            let alpha = v(&[0.3, -1.2, 0.7, 2.0]);
            let w_star = p.inner_closed_form(&alpha).unwrap();
            let residual = p.a().matvec(&w_star).unwrap().sub(&p.b().matvec(&alpha).unwrap()).unwrap();
            assert!(residual.norm() <= 1e-10);
            assert!(p.inner_grads(&w_star, &alpha, None).unwrap().grad_w.norm() <= 1e-10);
        }
    }

    #[test]
    fn zero_target_zero_alpha_is_stationary() {
        let p = QuadraticBilevel::new(
            RealMatrix::new(1, 1, vec![2.0]).unwrap(),
            RealMatrix::new(1, 1, vec![1.0]).unwrap(),
            v(&[0.0]),
            0.0,
        )
        .unwrap();
        assert!(p.oracle_exact_hypergradient(&v(&[0.0])).unwrap().is_zero());
    }

    #[test]
    fn rejects_non_spd() {
        let a = RealMatrix::diagonal(&[1.0, -1.0]).unwrap();
        assert!(QuadraticBilevel::new(a, RealMatrix::identity(2), RealVector::zeros(2), 0.0).is_err());
        let asym = RealMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(QuadraticBilevel::new(asym, RealMatrix::identity(2), RealVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn wrong_batch_source_is_contract_error() {
        let p = QuadraticBilevel::scalar();
        let val = Batch::new(Split::Val, vec![]).unwrap();
        assert!(matches!(
            p.inner_grads(&v(&[0.5]), &v(&[1.0]), Some(&val)),
            Err(Error::Contract(_))
        ));
    }
}
