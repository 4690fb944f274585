//! Bilevel problem definitions.
//!
//! A bilevel problem pairs an inner (training) objective `L1(w, α)` minimized
//! over the weights `w` with an outer (validation) objective `L2(w, α)`
//! minimized over `α` at the inner solution `w*(α)`. Problems expose losses,
//! first derivatives and Hessian-vector products of `L1`; everything else is
//! built on top of those in [`crate::derivatives`] and [`crate::estimators`].

mod quadratic;
mod ridge;
mod supernet;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RealMatrix, RealVector};

pub use quadratic::QuadraticBilevel;
pub use ridge::RidgeHyperopt;
pub use supernet::{
    enumerate_and_rank, softmax_weights, Architecture, Op, RankedArchitecture, SupernetConfig, ToySupernet,
    EDGES, FEATURE_DIM, OPS, STANDALONE_INIT_SEED, STANDALONE_LR,
};

/// Scale of the Gaussian used for initial weights.
pub const INIT_WEIGHT_STD: f64 = 0.1;

/// Which half of a dataset a batch is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Feeds the inner objective `L1`.
    Train,
    /// Feeds the outer objective `L2`.
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// A sorted set of unique sample indices from one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    source: Split,
    indices: Vec<usize>,
}

impl Batch {
    pub fn new(source: Split, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("batch indices must be sorted and unique"));
        }
        Ok(Self { source, indices })
    }

    /// Every index of a split of length `len`, in order.
    pub fn full(source: Split, len: usize) -> Self {
        Self {
            source,
            indices: (0..len).collect(),
        }
    }

    pub fn source(&self) -> Split {
        self.source
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Loss value and both partial derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub grad_w: RealVector,
    pub grad_alpha: RealVector,
}

/// Inner weights and outer parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelState {
    pub w: RealVector,
    pub alpha: RealVector,
    pub inner_step_count: u64,
    pub outer_step_count: u64,
}

impl BilevelState {
    pub fn new(w: RealVector, alpha: RealVector) -> Self {
        Self {
            w,
            alpha,
            inner_step_count: 0,
            outer_step_count: 0,
        }
    }

    /// Same α and counters, different weights.
    pub fn with_w(&self, w: RealVector) -> Self {
        Self {
            w,
            alpha: self.alpha.clone(),
            inner_step_count: self.inner_step_count,
            outer_step_count: self.outer_step_count,
        }
    }

    pub fn check_dims(&self, problem: &(impl BilevelProblem + ?Sized)) -> Result<()> {
        check_point(problem, &self.w, &self.alpha)
    }
}

/// Per-edge grouping of the α vector for argmax discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchLayout {
    pub edges: usize,
    pub ops_per_edge: usize,
}

impl ArchLayout {
    pub fn alpha_len(&self) -> usize {
        self.edges * self.ops_per_edge
    }
}

/// Losses, gradients and curvature access for a bilevel problem.
///
/// `batch = None` means the full split. Implementations must reject a batch
/// drawn from the wrong split with [`Error::Contract`].
pub trait BilevelProblem: Send + Sync {
    fn name(&self) -> &str;
    fn w_dim(&self) -> usize;
    fn alpha_dim(&self) -> usize;

    /// Number of samples in a split; `None` for problems without data.
    fn split_len(&self, split: Split) -> Option<usize>;

    /// `L1` and its partials, averaged over the train batch.
    fn inner_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads>;

    /// `L2` and its partials, averaged over the val batch.
    fn outer_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads>;

    /// `v · ∂²L1/∂w∂w`.
    fn hvp_inner_ww(
        &self,
        w: &RealVector,
        alpha: &RealVector,
        v: &RealVector,
        batch: Option<&Batch>,
    ) -> Result<RealVector>;

    /// `vᵀ · ∂²L1/∂α∂w` in closed form, when the problem has one.
    fn mixed_product_analytic(&self, _w: &RealVector, _alpha: &RealVector, _v: &RealVector) -> Result<RealVector> {
        Err(Error::NotAvailable(format!(
            "{} has no analytic mixed derivative; use finite differences",
            self.name()
        )))
    }

    /// The dense inner Hessian, when cheap to form directly.
    fn dense_inner_hessian(
        &self,
        _w: &RealVector,
        _alpha: &RealVector,
        _batch: Option<&Batch>,
    ) -> Option<Result<RealMatrix>> {
        None
    }

    fn as_quadratic(&self) -> Option<&QuadraticBilevel> {
        None
    }

    fn as_supernet(&self) -> Option<&ToySupernet> {
        None
    }

    fn arch_layout(&self) -> Option<ArchLayout> {
        None
    }

    /// Whether the convergence theorem's structural assumptions hold
    /// (strongly convex inner problem, minibatch terms linear in `w`).
    fn satisfies_convergence_hypotheses(&self) -> bool {
        false
    }

    /// α = 0 (uniform mixture) and seeded Gaussian weights with std [`INIT_WEIGHT_STD`].
    fn initial_state(&self, seed: u64) -> BilevelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid std");
        let w: Vec<f64> = (0..self.w_dim()).map(|_| normal.sample(&mut rng)).collect();
        BilevelState::new(
            RealVector::new(w).expect("finite gaussian draws"),
            RealVector::zeros(self.alpha_dim()),
        )
    }
}

pub(crate) fn check_point(
    problem: &(impl BilevelProblem + ?Sized),
    w: &RealVector,
    alpha: &RealVector,
) -> Result<()> {
    if w.len() != problem.w_dim() {
        return Err(Error::Dimension {
            context: "weights",
            expected: problem.w_dim(),
            found: w.len(),
        });
    }
    if alpha.len() != problem.alpha_dim() {
        return Err(Error::Dimension {
            context: "alpha",
            expected: problem.alpha_dim(),
            found: alpha.len(),
        });
    }
    Ok(())
}

/// Rejects batches from the wrong split or with out-of-range indices.
pub(crate) fn check_batch(batch: Option<&Batch>, expected: Split, split_len: Option<usize>) -> Result<()> {
    let Some(batch) = batch else { return Ok(()) };
    if batch.source() != expected {
        return Err(Error::contract(format!(
            "{} batch passed where a {expected} batch is required",
            batch.source()
        )));
    }
    if let Some(n) = split_len {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if let Some(&last) = batch.indices().last() {
            if last >= n {
                return Err(Error::contract(format!(
                    "batch index {last} out of range for {expected} split of {n}"
                )));
            }
        }
    }
    Ok(())
}

/// Uniform sample without replacement from one split, returned sorted.
///
/// Problems without data return an empty batch tagged with `source`.
pub fn sample_minibatch(
    problem: &(impl BilevelProblem + ?Sized),
    source: Split,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let Some(n) = problem.split_len(source) else {
        return Batch::new(source, Vec::new());
    };
    if size == 0 || size > n {
        return Err(Error::contract(format!(
            "batch size {size} must be in 1..={n} for the {source} split"
        )));
    }
    let mut indices = rand::seq::index::sample(rng, n, size).into_vec();
    indices.sort_unstable();
    Batch::new(source, indices)
}

/// Constants of the Neumann truncation error bound on a quadratic problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Strong-convexity constant: smallest eigenvalue of the inner Hessian.
    pub mu: f64,
    /// Largest eigenvalue of the inner Hessian.
    pub lambda_max: f64,
    /// Operator norm of the mixed block `∂²L1/∂α∂w`.
    pub c_l1_wa: f64,
    /// Bound on `‖∂L2/∂w‖` over the supplied region.
    pub c_l2_w: f64,
    pub gamma: f64,
}

impl TheoryConstants {
    /// `c_l1_wa · c_l2_w · (1/μ) · (1 − γμ)^(K+1)`
    pub fn neumann_error_bound(&self, k: usize) -> f64 {
        self.c_l1_wa * self.c_l2_w / self.mu * (1.0 - self.gamma * self.mu).powi(k as i32 + 1)
    }
}

/// Computes [`TheoryConstants`] for a quadratic problem over a set of inner points.
pub fn theory_constants(problem: &QuadraticBilevel, region: &[RealVector], gamma: f64) -> Result<TheoryConstants> {
    if !(gamma > 0.0) {
        return Err(Error::Config("gamma must be > 0".into()));
    }
    let eig = problem.a().symmetric_eigenvalues()?;
    let mu = eig[0];
    let lambda_max = *eig.last().expect("non-empty spectrum");
    if !(mu > 0.0) {
        return Err(Error::contract("inner Hessian is not positive definite"));
    }
    if gamma * mu > 1.0 {
        return Err(Error::contract(format!(
            "gamma·mu = {} exceeds 1; the Neumann bound does not apply",
            gamma * mu
        )));
    }
    let mut c_l2_w: f64 = 0.0;
    for w in region {
        c_l2_w = c_l2_w.max(w.sub(problem.c())?.norm());
    }
    Ok(TheoryConstants {
        mu,
        lambda_max,
        c_l1_wa: problem.b().spectral_norm(),
        c_l2_w,
        gamma,
    })
}

/// Named problem instances usable from configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    QuadScalar,
    Quad10d,
    Ridge20f,
    ToyNas,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::QuadScalar, Preset::Quad10d, Preset::Ridge20f, Preset::ToyNas];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::QuadScalar => "quad-scalar",
            Preset::Quad10d => "quad-10d",
            Preset::Ridge20f => "ridge-20f",
            Preset::ToyNas => "toynas",
        }
    }

    pub fn build(&self) -> Arc<dyn BilevelProblem> {
        match self {
            Preset::QuadScalar => Arc::new(QuadraticBilevel::scalar()),
            Preset::Quad10d => Arc::new(QuadraticBilevel::preset_10d()),
            Preset::Ridge20f => Arc::new(RidgeHyperopt::preset_20f()),
            Preset::ToyNas => Arc::new(ToySupernet::new(SupernetConfig::default())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!("unknown problem preset '{s}' (valid: {})", names.join(", ")))
            })
    }
}
