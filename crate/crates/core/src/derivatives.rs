//! Second-order products built from first-order oracles.
//!
//! - [`neumann_sum_vector`]: `V_0 + … + V_K` with `V_j = V_{j−1}(I − γH)`,
//!   one Hessian-vector product per term.
//! - [`finite_diff_mixed_product`]: `a · ∂²L1/∂α∂w` from two gradient
//!   evaluations at `w ± εa`.
//! - [`hvp_numeric`]: `v · ∂²L1/∂w∂w` by the same central difference on `∇_w L1`.
//!
//! All finite differences work on scratch copies; the caller's `w` is never touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealVector;
use crate::problems::{check_point, Batch, BilevelProblem};

/// How the finite-difference step is chosen from the direction vector `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EpsilonRule {
    /// `ε = numerator / ‖a‖₂`
    Scaled { numerator: f64 },
    /// `ε` independent of `a`.
    Fixed(f64),
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule::Scaled { numerator: 0.01 }
    }
}

impl EpsilonRule {
    /// Step for a nonzero direction of norm `a_norm`.
    pub fn epsilon(&self, a_norm: f64) -> f64 {
        match *self {
            EpsilonRule::Scaled { numerator } => numerator / a_norm,
            EpsilonRule::Fixed(eps) => eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let value = match *self {
            EpsilonRule::Scaled { numerator } => numerator,
            EpsilonRule::Fixed(eps) => eps,
        };
        if value > 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("epsilon must be > 0".into()))
        }
    }
}

/// Running state of the Neumann vector recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct NeumannAccumulator {
    /// `V_k`
    pub v_current: RealVector,
    /// `V_0 + … + V_k`
    pub v_sum: RealVector,
    pub k: usize,
    pub gamma: f64,
    pub hvp_count: usize,
}

impl NeumannAccumulator {
    pub fn new(v0: RealVector, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        Ok(Self {
            v_sum: v0.clone(),
            v_current: v0,
            k: 0,
            gamma,
            hvp_count: 0,
        })
    }

    /// Advances to `V_{k+1} = V_k − γ·HVP(V_k)` with one Hessian-vector product.
    pub fn step(
        &mut self,
        problem: &(impl BilevelProblem + ?Sized),
        w: &RealVector,
        alpha: &RealVector,
        batch: Option<&Batch>,
    ) -> Result<()> {
        let next_k = self.k + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Divergence { k: next_k },
            other => other,
        };
        let hv = problem.hvp_inner_ww(w, alpha, &self.v_current, batch).map_err(diverged)?;
        self.hvp_count += 1;
        let next = self.v_current.axpy(-self.gamma, &hv).map_err(diverged)?;
        self.v_sum = self.v_sum.add(&next).map_err(diverged)?;
        self.v_current = next;
        self.k = next_k;
        Ok(())
    }
}

/// `V_0 + … + V_K` using exactly `K` Hessian-vector products.
pub fn neumann_sum_vector(
    problem: &(impl BilevelProblem + ?Sized),
    w: &RealVector,
    alpha: &RealVector,
    v0: RealVector,
    k: usize,
    gamma: f64,
    batch: Option<&Batch>,
) -> Result<(RealVector, NeumannAccumulator)> {
    check_point(problem, w, alpha)?;
    if v0.len() != problem.w_dim() {
        return Err(Error::Dimension {
            context: "Neumann seed vector",
            expected: problem.w_dim(),
            found: v0.len(),
        });
    }
    let mut acc = NeumannAccumulator::new(v0, gamma)?;
    for _ in 0..k {
        acc.step(problem, w, alpha, batch)?;
    }
    Ok((acc.v_sum.clone(), acc))
}

/// Central difference of `f` along `a`: `[f(w + εa) − f(w − εa)] / (2ε)`.
fn central_difference(
    w: &RealVector,
    a: &RealVector,
    rule: EpsilonRule,
    out_len: usize,
    f: impl Fn(&RealVector) -> Result<RealVector>,
) -> Result<RealVector> {
    if w.len() != a.len() {
        return Err(Error::Dimension {
            context: "finite-difference direction",
            expected: w.len(),
            found: a.len(),
        });
    }
    if a.is_zero() {
        return Ok(RealVector::zeros(out_len));
    }
    rule.validate()?;
    let eps = rule.epsilon(a.norm());
    let plus = f(&w.axpy(eps, a)?)?;
    let minus = f(&w.axpy(-eps, a)?)?;
    plus.sub(&minus)?.scale(0.5 / eps)
}

/// `a · ∂²L1/∂α∂w` (an α-sized vector) from two evaluations of `∂L1/∂α`.
pub fn finite_diff_mixed_product(
    problem: &(impl BilevelProblem + ?Sized),
    w: &RealVector,
    alpha: &RealVector,
    a: &RealVector,
    rule: EpsilonRule,
    batch: Option<&Batch>,
) -> Result<RealVector> {
    check_point(problem, w, alpha)?;
    central_difference(w, a, rule, problem.alpha_dim(), |wp| {
        Ok(problem.inner_grads(wp, alpha, batch)?.grad_alpha)
    })
}

/// `v · ∂²L1/∂w∂w` from two evaluations of `∇_w L1`.
pub fn hvp_numeric(
    problem: &(impl BilevelProblem + ?Sized),
    w: &RealVector,
    alpha: &RealVector,
    v: &RealVector,
    batch: Option<&Batch>,
    rule: EpsilonRule,
) -> Result<RealVector> {
    check_point(problem, w, alpha)?;
    central_difference(w, v, rule, problem.w_dim(), |wp| {
        Ok(problem.inner_grads(wp, alpha, batch)?.grad_w)
    })
}
