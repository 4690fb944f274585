//! Alternating bilevel search: `T` inner weight steps, then one α step along
//! an estimated hypergradient, repeated for a fixed number of rounds.
//!
//! Weights persist across rounds (weight sharing). Minibatches for the inner
//! steps are drawn fresh each step; the estimator's batches are drawn after
//! the inner steps. Reverse-mode estimators are the exception: they need
//! their batch before the inner steps, which then run on that one batch so
//! the estimator differentiates through exactly the steps taken.

use std::f64::consts::PI;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, BatchMode, EstimatorBatches, EstimatorSpec};
use crate::numerics::RealVector;
use crate::problems::{sample_minibatch, ArchLayout, BilevelProblem, BilevelState, Split};

/// Hypergradient norm below which a round counts toward convergence.
pub const CONVERGENCE_TOL: f64 = 1e-5;
/// Consecutive rounds below [`CONVERGENCE_TOL`] needed to flag convergence.
pub const CONVERGENCE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `gamma_alpha` at round 0 to `floor` at the last round.
    Cosine { floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// The estimator; its `gamma` is also the inner learning rate.
    pub estimator: EstimatorSpec,
    pub inner_steps: usize,
    pub gamma_alpha: f64,
    pub schedule: Schedule,
    pub rounds: usize,
    pub seed: u64,
    /// Quadratic problems only: record `‖estimate − oracle‖` each round.
    pub record_oracle_error: bool,
}

impl SearchConfig {
    pub fn new(estimator: EstimatorSpec, inner_steps: usize, gamma_alpha: f64, rounds: usize, seed: u64) -> Self {
        Self {
            estimator,
            inner_steps,
            gamma_alpha,
            schedule: Schedule::Constant,
            rounds,
            seed,
            record_oracle_error: false,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.estimator.gamma
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be ≥ 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("T must be ≥ 1".into()));
        }
        if !(self.gamma_alpha >= 0.0) || !self.gamma_alpha.is_finite() {
            return Err(Error::Config("gamma_alpha must be ≥ 0".into()));
        }
        if let Schedule::Cosine { floor } = self.schedule {
            if !(floor >= 0.0 && floor <= self.gamma_alpha) {
                return Err(Error::Config("gamma_alpha_floor must be in [0, gamma_alpha]".into()));
            }
        }
        if self.estimator.kind.is_unrolled() && self.estimator.t != Some(self.inner_steps) {
            return Err(Error::Config(format!(
                "{} unrolls the inner steps itself; its T must equal the search T",
                self.estimator.kind
            )));
        }
        Ok(())
    }

    /// Outer learning rate at `round` (0-based).
    pub fn gamma_alpha_at(&self, round: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.gamma_alpha,
            Schedule::Cosine { floor } => {
                let frac = round as f64 / self.rounds.max(1) as f64;
                floor + (self.gamma_alpha - floor) * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Full-split `L1` after the inner steps.
    pub inner_loss: f64,
    /// Full-split `L2` before the α step.
    pub outer_loss: f64,
    pub hyper_norm: f64,
    pub hyper_oracle_err: Option<f64>,
    /// FNV-1a hash of α's bit patterns after the update.
    pub alpha_hash: u64,
    pub wall_ns: u64,
    pub hvp_count_cum: u64,
    pub stored_vector_peak: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrajectory {
    pub records: Vec<RoundRecord>,
    pub final_state: BilevelState,
    pub architecture: Option<Vec<usize>>,
    /// First round closing a window of [`CONVERGENCE_WINDOW`] rounds below [`CONVERGENCE_TOL`].
    pub converged_at: Option<usize>,
    /// Whether the problem meets the convergence theorem's assumptions.
    pub theory_hypotheses_hold: bool,
}

impl SearchTrajectory {
    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    pub fn final_alpha(&self) -> &RealVector {
        &self.final_state.alpha
    }
}

/// A failed run with everything recorded before the failure.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{error}")]
pub struct SearchError {
    pub error: Error,
    pub partial: SearchTrajectory,
}

/// FNV-1a over the little-endian bytes of every entry.
pub fn alpha_hash(alpha: &RealVector) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in alpha.iter() {
        for byte in x.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Per-edge argmax of the logits; ties go to the lowest op index.
pub fn discretize_argmax(alpha: &RealVector, layout: ArchLayout) -> Result<Vec<usize>> {
    if alpha.len() != layout.alpha_len() || layout.ops_per_edge == 0 {
        return Err(Error::Dimension {
            context: "alpha vs architecture layout",
            expected: layout.alpha_len(),
            found: alpha.len(),
        });
    }
    Ok(alpha
        .as_slice()
        .chunks(layout.ops_per_edge)
        .map(|logits| {
            let mut best = 0;
            for (o, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = o;
                }
            }
            best
        })
        .collect())
}

/// Plain gradient descent on `L1` for `T` steps, with a fresh train minibatch
/// per step when `batch_size` is given.
pub fn inner_descend(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    t_steps: usize,
    gamma: f64,
    batch_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<BilevelState> {
    if t_steps == 0 {
        return Err(Error::Config("T must be ≥ 1".into()));
    }
    let mut w = state.w.clone();
    for step in 1..=t_steps {
        let batch = match batch_size {
            Some(size) => Some(sample_minibatch(problem, Split::Train, size, rng)?),
            None => None,
        };
        let g = problem.inner_grads(&w, &state.alpha, batch.as_ref())?;
        w = w.axpy(-gamma, &g.grad_w).map_err(|_| Error::InnerDivergence { step })?;
    }
    let mut next = state.with_w(w);
    next.inner_step_count += t_steps as u64;
    Ok(next)
}

fn fixed_batch_descend(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    t_steps: usize,
    gamma: f64,
    batches: &EstimatorBatches,
) -> Result<BilevelState> {
    let mut w = state.w.clone();
    for step in 1..=t_steps {
        let g = problem.inner_grads(&w, &state.alpha, batches.train.as_ref())?;
        w = w.axpy(-gamma, &g.grad_w).map_err(|_| Error::InnerDivergence { step })?;
    }
    let mut next = state.with_w(w);
    next.inner_step_count += t_steps as u64;
    Ok(next)
}

fn estimator_batches(
    problem: &(impl BilevelProblem + ?Sized),
    mode: BatchMode,
    rng: &mut ChaCha8Rng,
) -> Result<EstimatorBatches> {
    match mode {
        BatchMode::Full => Ok(EstimatorBatches::full()),
        BatchMode::Minibatch { train, val } => {
            let i = sample_minibatch(problem, Split::Val, val, rng)?;
            let j = sample_minibatch(problem, Split::Train, train, rng)?;
            Ok(EstimatorBatches::new(i, j))
        }
    }
}

/// One round: inner steps, one estimate, one α step. `hvp_count_cum` in the
/// returned record counts this round only; [`run_search`] accumulates it.
pub fn algorithm1_round(
    problem: &(impl BilevelProblem + ?Sized),
    state: &BilevelState,
    config: &SearchConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(BilevelState, RoundRecord)> {
    let start = Instant::now();
    let spec = &config.estimator;
    let inner_batch = match spec.batch_mode {
        BatchMode::Full => None,
        BatchMode::Minibatch { train, .. } => Some(train),
    };

    let (after_inner, batches, estimate_from) = if spec.kind.is_unrolled() {
        let batches = estimator_batches(problem, spec.batch_mode, rng)?;
        let next = fixed_batch_descend(problem, state, config.inner_steps, spec.gamma, &batches)?;
        (next, batches, state.clone())
    } else {
        let next = inner_descend(problem, state, config.inner_steps, spec.gamma, inner_batch, rng)?;
        let batches = estimator_batches(problem, spec.batch_mode, rng)?;
        let from = next.clone();
        (next, batches, from)
    };

    let inner_loss = problem.inner_grads(&after_inner.w, &after_inner.alpha, None)?.loss;
    let outer_loss = problem.outer_grads(&after_inner.w, &after_inner.alpha, None)?.loss;
    let est = estimate(problem, &estimate_from, spec, &batches)?;
    let hyper_norm = est.grad_alpha.norm();
    let hyper_oracle_err = match (config.record_oracle_error, problem.as_quadratic()) {
        (true, Some(q)) => Some(q.oracle_exact_hypergradient(&after_inner.alpha)?.sub(&est.grad_alpha)?.norm()),
        _ => None,
    };

    let mut next = after_inner;
    next.alpha = next.alpha.axpy(-config.gamma_alpha_at(round), &est.grad_alpha)?;
    next.outer_step_count += 1;

    let record = RoundRecord {
        round,
        inner_loss,
        outer_loss,
        hyper_norm,
        hyper_oracle_err,
        alpha_hash: alpha_hash(&next.alpha),
        wall_ns: start.elapsed().as_nanos() as u64,
        hvp_count_cum: est.hvp_count as u64,
        stored_vector_peak: est.stored_vector_peak,
    };
    Ok((next, record))
}

/// Runs the search from the problem's seeded initial state.
#[allow(clippy::result_large_err)] // the error carries the partial trajectory
pub fn run_search(
    problem: &(impl BilevelProblem + ?Sized),
    config: &SearchConfig,
) -> std::result::Result<SearchTrajectory, SearchError> {
    run_search_from(problem, config, problem.initial_state(config.seed))
}

/// Runs exactly `config.rounds` rounds from `state`.
#[allow(clippy::result_large_err)]
pub fn run_search_from(
    problem: &(impl BilevelProblem + ?Sized),
    config: &SearchConfig,
    state: BilevelState,
) -> std::result::Result<SearchTrajectory, SearchError> {
    let mut trajectory = SearchTrajectory {
        records: Vec::with_capacity(config.rounds),
        final_state: state,
        architecture: None,
        converged_at: None,
        theory_hypotheses_hold: problem.satisfies_convergence_hypotheses(),
    };
    let setup = config
        .validate()
        .and_then(|_| config.estimator.validate_for(problem))
        .and_then(|_| trajectory.final_state.check_dims(problem));
    if let Err(error) = setup {
        return Err(SearchError {
            error,
            partial: trajectory,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut hvp_total = 0u64;
    let mut below = 0usize;
    for round in 0..config.rounds {
        match algorithm1_round(problem, &trajectory.final_state, config, round, &mut rng) {
            Ok((next, mut record)) => {
                hvp_total += record.hvp_count_cum;
                record.hvp_count_cum = hvp_total;
                below = if record.hyper_norm < CONVERGENCE_TOL { below + 1 } else { 0 };
                if below >= CONVERGENCE_WINDOW && trajectory.converged_at.is_none() {
                    trajectory.converged_at = Some(round);
                }
                trajectory.records.push(record);
                trajectory.final_state = next;
            }
            Err(e) => {
                return Err(SearchError {
                    error: e.in_round(round),
                    partial: trajectory,
                })
            }
        }
    }
    if let Some(layout) = problem.arch_layout() {
        trajectory.architecture = discretize_argmax(&trajectory.final_state.alpha, layout).ok();
    }
    Ok(trajectory)
}
