//! Hypergradient estimators.
//!
//! Every estimator approximates
//!
//! ```text
//! ∇_α L2 = ∂L2/∂α − ∂L2/∂w · [∂²L1/∂w∂w]⁻¹ · ∂²L1/∂α∂w
//! ```
//!
//! and differs only in how the inverse-Hessian product is replaced:
//!
//! | kind                 | inverse replaced by                      | HVPs    |
//! |----------------------|------------------------------------------|---------|
//! | `one_step_unrolled`  | `γ·I`                                    | 0       |
//! | `t1t2`               | `I`                                      | 0       |
//! | `neumann_k`          | `γ Σ_{k≤K} (I − γH)^k`                   | K       |
//! | `stochastic_neumann` | same, on minibatches                     | K       |
//! | `conjugate_gradient` | S iterations of CG on `H x = ∂L2/∂w`     | ≤ S     |
//! | `exact_ift`          | dense solve                              | 0 or n  |
//! | `reverse_mode`       | backprop through T inner steps           | T − 1   |
//! | `truncated_reverse`  | backprop through the last K of T steps   | K − 1   |
//!
//! `stored_vector_peak` counts the w-sized vectors an estimator holds at
//! once, excluding the input state and any scratch space inside the
//! problem's own gradient and HVP routines.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::derivatives::{finite_diff_mixed_product, EpsilonRule, NeumannAccumulator};
use crate::error::{Error, Result};
use crate::numerics::{dense_solve, RealMatrix, RealVector};
use crate::problems::{Batch, BilevelProblem, BilevelState, Split};

/// Problems with more weights than this never get a dense Hessian assembled.
pub const DENSE_ASSEMBLY_LIMIT: usize = 2000;
/// Relative curvature below which conjugate gradient reports breakdown.
pub const CG_BREAKDOWN_TOL: f64 = 1e-14;
/// Relative residual at which conjugate gradient stops early.
pub const CG_RESIDUAL_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    ExactIft,
    OneStepUnrolled,
    T1t2,
    ReverseMode,
    TruncatedReverse,
    NeumannK,
    ConjugateGradient,
    StochasticNeumann,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::ExactIft,
        EstimatorKind::OneStepUnrolled,
        EstimatorKind::T1t2,
        EstimatorKind::ReverseMode,
        EstimatorKind::TruncatedReverse,
        EstimatorKind::NeumannK,
        EstimatorKind::ConjugateGradient,
        EstimatorKind::StochasticNeumann,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::ExactIft => "exact_ift",
            EstimatorKind::OneStepUnrolled => "one_step_unrolled",
            EstimatorKind::T1t2 => "t1t2",
            EstimatorKind::ReverseMode => "reverse_mode",
            EstimatorKind::TruncatedReverse => "truncated_reverse",
            EstimatorKind::NeumannK => "neumann_k",
            EstimatorKind::ConjugateGradient => "conjugate_gradient",
            EstimatorKind::StochasticNeumann => "stochastic_neumann",
        }
    }

    pub fn uses_k(&self) -> bool {
        matches!(
            self,
            EstimatorKind::NeumannK | EstimatorKind::StochasticNeumann | EstimatorKind::TruncatedReverse
        )
    }

    pub fn uses_t(&self) -> bool {
        matches!(self, EstimatorKind::ReverseMode | EstimatorKind::TruncatedReverse)
    }

    pub fn uses_s(&self) -> bool {
        matches!(self, EstimatorKind::ConjugateGradient)
    }

    /// Kinds that run their own inner unroll instead of evaluating at the given `w`.
    pub fn is_unrolled(&self) -> bool {
        self.uses_t()
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cg" {
            return Ok(EstimatorKind::ConjugateGradient);
        }
        EstimatorKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = EstimatorKind::ALL.iter().map(|k| k.as_str()).collect();
            Error::Config(format!("unknown estimator '{s}' (valid: {})", names.join(", ")))
        })
    }
}

/// Which batches the search loop samples for the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    Minibatch { train: usize, val: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// Neumann terms, or retained steps for `truncated_reverse`.
    pub k: Option<usize>,
    /// Inner steps of the reverse kinds.
    pub t: Option<usize>,
    /// Conjugate-gradient iterations.
    pub s: Option<usize>,
    /// Inner learning rate.
    pub gamma: f64,
    pub epsilon_rule: EpsilonRule,
    pub batch_mode: BatchMode,
}

impl EstimatorSpec {
    fn base(kind: EstimatorKind, gamma: f64) -> Self {
        Self {
            kind,
            k: None,
            t: None,
            s: None,
            gamma,
            epsilon_rule: EpsilonRule::default(),
            batch_mode: BatchMode::Full,
        }
    }

    pub fn exact_ift(gamma: f64) -> Self {
        Self::base(EstimatorKind::ExactIft, gamma)
    }

    pub fn one_step_unrolled(gamma: f64) -> Self {
        Self::base(EstimatorKind::OneStepUnrolled, gamma)
    }

    pub fn t1t2(gamma: f64) -> Self {
        Self::base(EstimatorKind::T1t2, gamma)
    }

    pub fn neumann(k: usize, gamma: f64) -> Self {
        Self {
            k: Some(k),
            ..Self::base(EstimatorKind::NeumannK, gamma)
        }
    }

    pub fn stochastic_neumann(k: usize, gamma: f64, train: usize, val: usize) -> Self {
        Self {
            k: Some(k),
            batch_mode: BatchMode::Minibatch { train, val },
            ..Self::base(EstimatorKind::StochasticNeumann, gamma)
        }
    }

    pub fn conjugate_gradient(s: usize, gamma: f64) -> Self {
        Self {
            s: Some(s),
            ..Self::base(EstimatorKind::ConjugateGradient, gamma)
        }
    }

    pub fn reverse_mode(t: usize, gamma: f64) -> Self {
        Self {
            t: Some(t),
            ..Self::base(EstimatorKind::ReverseMode, gamma)
        }
    }

    pub fn truncated_reverse(t: usize, retained: usize, gamma: f64) -> Self {
        Self {
            t: Some(t),
            k: Some(retained),
            ..Self::base(EstimatorKind::TruncatedReverse, gamma)
        }
    }

    pub fn with_epsilon(mut self, rule: EpsilonRule) -> Self {
        self.epsilon_rule = rule;
        self
    }

    pub fn with_batch_mode(mut self, mode: BatchMode) -> Self {
        self.batch_mode = mode;
        self
    }

    /// Problem-independent checks of the kind-specific fields.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        self.epsilon_rule.validate()?;
        let field = |present: bool, used: bool, name: &str| -> Result<()> {
            match (present, used) {
                (true, false) => Err(Error::Config(format!("{name} is not a parameter of {kind}"))),
                (false, true) => Err(Error::Config(format!("{kind} requires {name}"))),
                _ => Ok(()),
            }
        };
        field(self.k.is_some(), kind.uses_k(), "K")?;
        field(self.t.is_some(), kind.uses_t(), "T")?;
        field(self.s.is_some(), kind.uses_s(), "S")?;
        if self.t == Some(0) {
            return Err(Error::Config("T must be ≥ 1".into()));
        }
        if self.s == Some(0) {
            return Err(Error::Config("S must be ≥ 1".into()));
        }
        if kind == EstimatorKind::TruncatedReverse {
            let (k, t) = (self.k.unwrap_or(0), self.t.unwrap_or(0));
            if k == 0 || k > t {
                return Err(Error::Config(format!("retained steps K={k} must be in 1..=T (T={t})")));
            }
        }
        match (kind, self.batch_mode) {
            (EstimatorKind::StochasticNeumann, BatchMode::Full) => {
                Err(Error::Config("stochastic_neumann requires minibatch sizes".into()))
            }
            (_, BatchMode::Minibatch { train: 0, .. }) | (_, BatchMode::Minibatch { val: 0, .. }) => {
                Err(Error::Config("batch sizes must be ≥ 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// [`validate`](Self::validate) plus checks that need the problem, such as
    /// `γ·λ_max ≤ 1` for the Neumann kinds on a quadratic.
    pub fn validate_for(&self, problem: &(impl BilevelProblem + ?Sized)) -> Result<()> {
        self.validate()?;
        if matches!(self.kind, EstimatorKind::NeumannK | EstimatorKind::StochasticNeumann) {
            if let Some(q) = problem.as_quadratic() {
                let lambda_max = q.a().spectral_norm();
                if self.gamma * lambda_max > 1.0 + 1e-12 {
                    return Err(Error::Config(format!(
                        "gamma·lambda_max = {} exceeds 1; the Neumann series would not contract",
                        self.gamma * lambda_max
                    )));
                }
            }
        }
        if let BatchMode::Minibatch { train, val } = self.batch_mode {
            for (split, size) in [(Split::Train, train), (Split::Val, val)] {
                if let Some(n) = problem.split_len(split) {
                    if size > n {
                        return Err(Error::Config(format!("{split} batch size {size} exceeds split size {n}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Batches for one estimate: `val` (i) feeds `L2`, `train` (j) feeds every
/// `L1` derivative. `None` means the full split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorBatches {
    pub val: Option<Batch>,
    pub train: Option<Batch>,
}

impl EstimatorBatches {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn new(val: Batch, train: Batch) -> Self {
        Self {
            val: Some(val),
            train: Some(train),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradientEstimate {
    pub grad_alpha: RealVector,
    pub hvp_count: usize,
    /// Direct gradient evaluations (HVP internals excluded).
    pub grad_eval_count: usize,
    pub stored_vector_peak: usize,
    pub wall_ns: u64,
}

#[derive(Default)]
struct Costs {
    live: usize,
    peak: usize,
    hvps: usize,
    grads: usize,
}

impl Costs {
    fn hold(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self, n: usize) {
        self.live -= n;
    }
}

struct Ctx<'a, P: ?Sized> {
    problem: &'a P,
    alpha: &'a RealVector,
    spec: &'a EstimatorSpec,
    batches: &'a EstimatorBatches,
    costs: Costs,
}

impl<P: BilevelProblem + ?Sized> Ctx<'_, P> {
    fn outer(&mut self, w: &RealVector) -> Result<(RealVector, RealVector)> {
        let g = self.problem.outer_grads(w, self.alpha, self.batches.val.as_ref())?;
        self.costs.grads += 1;
        Ok((g.grad_alpha, g.grad_w))
    }

    /// `a · ∂²L1/∂α∂w` by central differences, holding a perturbed `w` and one gradient.
    fn mixed(&mut self, w: &RealVector, a: &RealVector) -> Result<RealVector> {
        if !a.is_zero() {
            self.costs.hold(2);
            self.costs.release(2);
            self.costs.grads += 2;
        }
        finite_diff_mixed_product(
            self.problem,
            w,
            self.alpha,
            a,
            self.spec.epsilon_rule,
            self.batches.train.as_ref(),
        )
    }

    fn hvp(&mut self, w: &RealVector, v: &RealVector) -> Result<RealVector> {
        self.costs.hvps += 1;
        self.problem.hvp_inner_ww(w, self.alpha, v, self.batches.train.as_ref())
    }

    fn finish(self, grad_alpha: RealVector, start: Instant) -> HypergradientEstimate {
        HypergradientEstimate {
            grad_alpha,
            hvp_count: self.costs.hvps,
            grad_eval_count: self.costs.grads,
            stored_vector_peak: self.costs.peak,
            wall_ns: start.elapsed().as_nanos() as u64,
        }
    }
}

fn context<'a, P: BilevelProblem + ?Sized>(
    problem: &'a P,
    state: &'a BilevelState,
    spec: &'a EstimatorSpec,
    batches: &'a EstimatorBatches,
    kinds: &[EstimatorKind],
) -> Result<Ctx<'a, P>> {
    if !kinds.contains(&spec.kind) {
        return Err(Error::contract(format!("estimator spec of kind {} passed to {}", spec.kind, kinds[0])));
    }
    spec.validate()?;
    state.check_dims(problem)?;
    Ok(Ctx {
        problem,
        alpha: &state.alpha,
        spec,
        batches,
        costs: Costs::default(),
    })
}

/// `∂L2/∂α − scale · (∂L2/∂w · ∂²L1/∂α∂w)` at the given state.
fn scaled_identity(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
    kind: EstimatorKind,
    scale: f64,
) -> Result<HypergradientEstimate> {
    let start = Instant::now();
    let mut cx = context(problem, state, spec, batches, &[kind])?;
    let (g_alpha, g_w) = cx.outer(&state.w)?;
    cx.costs.hold(1);
    let m = cx.mixed(&state.w, &g_w)?;
    let result = g_alpha.axpy(-scale, &m)?;
    Ok(cx.finish(result, start))
}

/// The one-step unrolled (DARTS) hypergradient at the current `w`.
pub fn estimate_one_step_unrolled(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    scaled_identity(problem, state, spec, batches, EstimatorKind::OneStepUnrolled, spec.gamma)
}

/// Identity in place of the inverse Hessian.
pub fn estimate_t1t2(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    scaled_identity(problem, state, spec, batches, EstimatorKind::T1t2, 1.0)
}

fn neumann_impl(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
    kind: EstimatorKind,
) -> Result<HypergradientEstimate> {
    let start = Instant::now();
    let mut cx = context(problem, state, spec, batches, &[kind])?;
    let k = spec.k.expect("validated");
    let (g_alpha, g_w) = cx.outer(&state.w)?;
    cx.costs.hold(1);
    let mut acc = NeumannAccumulator::new(g_w, spec.gamma)?;
    cx.costs.hold(1);
    if k > 0 {
        // V_k, running sum, HVP output
        cx.costs.hold(1);
        for _ in 0..k {
            acc.step(problem, &state.w, &state.alpha, batches.train.as_ref())?;
        }
        cx.costs.hvps += acc.hvp_count;
        cx.costs.release(1);
    }
    cx.costs.release(1);
    let m = cx.mixed(&state.w, &acc.v_sum)?;
    let result = g_alpha.axpy(-spec.gamma, &m)?;
    Ok(cx.finish(result, start))
}

/// `K`-term Neumann approximation of the inverse Hessian.
pub fn estimate_neumann_k(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    neumann_impl(problem, state, spec, batches, EstimatorKind::NeumannK)
}

/// Neumann approximation with every factor on minibatches: `i` for `L2`,
/// and the same `j` for all HVPs and both mixed-product evaluations.
pub fn estimate_stochastic_neumann(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    neumann_impl(problem, state, spec, batches, EstimatorKind::StochasticNeumann)
}

/// Conjugate gradient on `H x = ∂L2/∂w` from `x₀ = 0`.
pub fn estimate_cg(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    let start = Instant::now();
    let mut cx = context(problem, state, spec, batches, &[EstimatorKind::ConjugateGradient])?;
    let iterations = spec.s.expect("validated");
    let (g_alpha, b) = cx.outer(&state.w)?;
    if b.is_zero() {
        return Ok(cx.finish(g_alpha, start));
    }
    // x, r, p, Hp
    cx.costs.hold(4);
    let b_norm = b.norm();
    let mut x = RealVector::zeros(b.len());
    let mut r = b;
    let mut p = r.clone();
    let mut rr = r.dot(&r)?;
    for iteration in 0..iterations {
        let hp = cx.hvp(&state.w, &p)?;
        let curvature = p.dot(&hp)?;
        if !(curvature > CG_BREAKDOWN_TOL * p.dot(&p)?) {
            return Err(Error::CgBreakdown { iteration, curvature });
        }
        let step = rr / curvature;
        x = x.axpy(step, &p)?;
        r = r.axpy(-step, &hp)?;
        let rr_next = r.dot(&r)?;
        if rr_next.sqrt() <= CG_RESIDUAL_TOL * b_norm {
            break;
        }
        p = r.axpy(rr_next / rr, &p)?;
        rr = rr_next;
    }
    cx.costs.release(3);
    let m = cx.mixed(&state.w, &x)?;
    let result = g_alpha.sub(&m)?;
    Ok(cx.finish(result, start))
}

/// Dense inner Hessian, from the problem or assembled column by column from HVPs.
fn dense_hessian<P: BilevelProblem + ?Sized>(cx: &mut Ctx<'_, P>, w: &RealVector) -> Result<RealMatrix> {
    if let Some(h) = cx.problem.dense_inner_hessian(w, cx.alpha, cx.batches.train.as_ref()) {
        return h;
    }
    let n = w.len();
    if n >= DENSE_ASSEMBLY_LIMIT {
        return Err(Error::NotAvailable(format!(
            "dense Hessian assembly needs fewer than {DENSE_ASSEMBLY_LIMIT} weights, got {n}"
        )));
    }
    let mut data = vec![0.0; n * n];
    for j in 0..n {
        let col = cx.hvp(w, &RealVector::basis(n, j))?;
        for (i, &hij) in col.iter().enumerate() {
            data[i * n + j] = hij;
        }
    }
    RealMatrix::new(n, n, data)
}

/// Implicit-function hypergradient with a dense solve; the in-library oracle.
///
/// Uses the analytic mixed derivative when the problem has one.
pub fn estimate_exact_ift(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    let start = Instant::now();
    let mut cx = context(problem, state, spec, batches, &[EstimatorKind::ExactIft])?;
    let (g_alpha, g_w) = cx.outer(&state.w)?;
    let n = state.w.len();
    cx.costs.hold(n + 1);
    let h = dense_hessian(&mut cx, &state.w)?;
    let x = dense_solve(&h.transpose(), &g_w)?;
    cx.costs.hold(1);
    cx.costs.release(n + 1);
    let m = match problem.mixed_product_analytic(&state.w, &state.alpha, &x) {
        Ok(m) => m,
        Err(Error::NotAvailable(_)) => cx.mixed(&state.w, &x)?,
        Err(e) => return Err(e),
    };
    let result = g_alpha.sub(&m)?;
    Ok(cx.finish(result, start))
}

/// Reverse accumulation through `T` inner steps from `state.w`, keeping the
/// last `retained` iterates on a tape.
fn reverse_impl(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
    kind: EstimatorKind,
    retained: usize,
) -> Result<HypergradientEstimate> {
    let start = Instant::now();
    let mut cx = context(problem, state, spec, batches, &[kind])?;
    let t_steps = spec.t.expect("validated");
    let gamma = spec.gamma;
    let train = batches.train.as_ref();

    let mut tape: VecDeque<RealVector> = VecDeque::with_capacity(retained);
    let mut w = state.w.clone();
    // current iterate and its gradient
    cx.costs.hold(2);
    for step in 1..=t_steps {
        if step + retained > t_steps {
            tape.push_back(w.clone());
            cx.costs.hold(1);
        }
        let g = problem.inner_grads(&w, &state.alpha, train)?;
        cx.costs.grads += 1;
        w = w
            .axpy(-gamma, &g.grad_w)
            .map_err(|_| Error::InnerDivergence { step })?;
    }
    let (g_alpha, mut v) = cx.outer(&w)?;
    drop(w);
    cx.costs.release(1);

    let mut acc = RealVector::zeros(problem.alpha_dim());
    let last = tape.len();
    for (idx, w_prev) in tape.iter().rev().enumerate() {
        // v · B_t with B_t = −γ ∂²L1/∂α∂w at w_{t−1}
        let m = cx.mixed(w_prev, &v)?;
        acc = acc.axpy(-gamma, &m)?;
        if idx + 1 < last {
            // v · A_t with A_t = I − γ H(w_{t−1})
            let hv = cx.hvp(w_prev, &v)?;
            v = v.axpy(-gamma, &hv).map_err(|_| Error::Divergence { k: idx + 1 })?;
        }
    }
    let result = g_alpha.add(&acc)?;
    Ok(cx.finish(result, start))
}

/// Backpropagation through all `T` unrolled inner steps starting at `state.w`.
pub fn estimate_reverse_mode(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    let t = spec.t.unwrap_or(0);
    reverse_impl(problem, state, spec, batches, EstimatorKind::ReverseMode, t)
}

/// Backpropagation through only the last `K` of `T` unrolled inner steps.
pub fn estimate_truncated_reverse(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    let k = spec.k.unwrap_or(0);
    reverse_impl(problem, state, spec, batches, EstimatorKind::TruncatedReverse, k)
}

/// Dispatches on `spec.kind` after problem-aware validation.
pub fn estimate(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    spec: &EstimatorSpec,
    batches: &EstimatorBatches,
) -> Result<HypergradientEstimate> {
    spec.validate_for(problem)?;
    match spec.kind {
        EstimatorKind::ExactIft => estimate_exact_ift(problem, state, spec, batches),
        EstimatorKind::OneStepUnrolled => estimate_one_step_unrolled(problem, state, spec, batches),
        EstimatorKind::T1t2 => estimate_t1t2(problem, state, spec, batches),
        EstimatorKind::ReverseMode => estimate_reverse_mode(problem, state, spec, batches),
        EstimatorKind::TruncatedReverse => estimate_truncated_reverse(problem, state, spec, batches),
        EstimatorKind::NeumannK => estimate_neumann_k(problem, state, spec, batches),
        EstimatorKind::ConjugateGradient => estimate_cg(problem, state, spec, batches),
        EstimatorKind::StochasticNeumann => estimate_stochastic_neumann(problem, state, spec, batches),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::QuadraticBilevel;

    fn at(w: f64) -> BilevelState {
        BilevelState::new(RealVector::from_slice(&[w]).unwrap(), RealVector::from_slice(&[1.0]).unwrap())
    }

    fn run(spec: &EstimatorSpec, w: f64) -> HypergradientEstimate {
        estimate(&QuadraticBilevel::scalar(), &at(w), spec, &EstimatorBatches::full()).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn scalar_values() {
        assert!(close(run(&EstimatorSpec::exact_ift(0.25), 0.5).grad_alpha[0], -0.25));
        assert!(close(run(&EstimatorSpec::one_step_unrolled(0.25), 0.5).grad_alpha[0], -0.125));
        assert!(close(run(&EstimatorSpec::t1t2(0.25), 0.5).grad_alpha[0], -0.5));
        assert!(close(run(&EstimatorSpec::neumann(1, 0.25), 0.5).grad_alpha[0], -0.1875));
        assert!(close(run(&EstimatorSpec::neumann(3, 0.25), 0.5).grad_alpha[0], -0.234375));
        assert!(close(run(&EstimatorSpec::conjugate_gradient(1, 0.25), 0.5).grad_alpha[0], -0.25));
    }

    #[test]
    fn reverse_scalar_values() {
        assert!(close(run(&EstimatorSpec::reverse_mode(2, 0.25), 0.0).grad_alpha[0], -0.234375));
        assert!(close(run(&EstimatorSpec::truncated_reverse(2, 1, 0.25), 0.0).grad_alpha[0], -0.15625));
        assert!(close(run(&EstimatorSpec::truncated_reverse(2, 2, 0.25), 0.5).grad_alpha[0], -0.1875));
    }

    #[test]
    fn counts() {
        let e = run(&EstimatorSpec::neumann(3, 0.25), 0.5);
        assert_eq!((e.hvp_count, e.grad_eval_count), (3, 3));
        assert!(e.stored_vector_peak <= 4);
        let e = run(&EstimatorSpec::one_step_unrolled(0.25), 0.5);
        assert_eq!(e.hvp_count, 0);
        assert!(e.stored_vector_peak <= 3);
        let e = run(&EstimatorSpec::truncated_reverse(8, 4, 0.25), 0.0);
        assert_eq!(e.hvp_count, 3);
    }

    #[test]
    fn zero_outer_gradient_short_circuits() {
        // w = c makes ∂L2/∂w vanish
        let e = run(&EstimatorSpec::conjugate_gradient(3, 0.25), 1.0);
        assert_eq!(e.grad_alpha[0], 0.0);
        assert_eq!(e.hvp_count, 0);
        assert_eq!(run(&EstimatorSpec::t1t2(0.25), 1.0).grad_alpha[0], 0.0);
    }

    #[test]
    fn validation_messages() {
        let mut spec = EstimatorSpec::neumann(2, -1.0);
        assert_eq!(spec.validate().unwrap_err(), Error::Config("gamma must be > 0".into()));
        spec = EstimatorSpec::reverse_mode(4, 0.1);
        spec.k = Some(2);
        assert!(spec.validate().unwrap_err().to_string().contains("K is not a parameter of reverse_mode"));
        spec = EstimatorSpec::neumann(2, 0.1);
        spec.s = Some(3);
        assert!(spec.validate().is_err());
        assert!(EstimatorSpec::truncated_reverse(2, 3, 0.1).validate().is_err());
        let p = QuadraticBilevel::scalar();
        assert!(EstimatorSpec::neumann(2, 0.6).validate_for(&p).is_err());
        assert!(EstimatorSpec::neumann(2, 0.5).validate_for(&p).is_ok());
    }

    #[test]
    fn kind_names() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        let msg = "bogus".parse::<EstimatorKind>().unwrap_err().to_string();
        assert!(msg.contains("neumann_k") && msg.contains("exact_ift"));
    }

    #[test]
    fn wrong_kind_is_contract_error() {
        let p = QuadraticBilevel::scalar();
        let r = estimate_neumann_k(&p, &at(0.5), &EstimatorSpec::t1t2(0.25), &EstimatorBatches::full());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
