//! A three-node toy supernet for architecture search.
//!
//! Nodes `X0` (input), `X1`, `X2` (output) are joined by edges (0,1), (0,2),
//! (1,2). Every edge mixes four candidate operations with softmax weights of
//! its α logits:
//!
//! ```text
//! X_n = Σ_{s<n} Σ_o softmax(α^(s,n))_o · o(X_s)
//! ```
//!
//! The dataset is generated by a teacher network with one fixed operation per
//! edge, so the brute-force best discrete architecture is known.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_batch, check_point, ArchLayout, Batch, BilevelProblem, LossGrads, Split};
use crate::derivatives::{hvp_numeric, EpsilonRule};
use crate::error::{Error, Result};
use crate::numerics::RealVector;

pub const FEATURE_DIM: usize = 4;
const D: usize = FEATURE_DIM;
const MAT: usize = D * D;
const PER_EDGE: usize = 2 * MAT;
const N_EDGES: usize = 3;
const N_OPS: usize = 4;

pub const EDGES: [(usize, usize); N_EDGES] = [(0, 1), (0, 2), (1, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Zero,
    Identity,
    Linear,
    TanhLinear,
}

pub const OPS: [Op; N_OPS] = [Op::Zero, Op::Identity, Op::Linear, Op::TanhLinear];

/// One operation index (into [`OPS`]) per edge of [`EDGES`].
pub type Architecture = [usize; N_EDGES];

type Mix = [[f64; N_OPS]; N_EDGES];
type Vec4 = [f64; D];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub samples: usize,
    pub noise_std: f64,
    pub teacher_ops: Architecture,
    pub teacher_weight_std: f64,
    pub seed: u64,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            noise_std: 0.01,
            // tanh-linear into the hidden node, linear skip and linear readout
            teacher_ops: [3, 2, 2],
            teacher_weight_std: 1.0,
            seed: 2021,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySupernet {
    config: SupernetConfig,
    x: Vec<Vec4>,
    y: Vec<Vec4>,
    train_len: usize,
    teacher_weights: Vec<f64>,
}

#[derive(Default)]
struct Activations {
    x1: Vec4,
    l01: Vec4,
    h01: Vec4,
    l02: Vec4,
    h02: Vec4,
    l12: Vec4,
    h12: Vec4,
    out: Vec4,
}

#[inline]
fn weight_offset(edge: usize, op: Op) -> usize {
    edge * PER_EDGE
        + match op {
            Op::Linear => 0,
            Op::TanhLinear => MAT,
            Op::Zero | Op::Identity => unreachable!("parameter-free op"),
        }
}

#[inline]
fn mat_vec(w: &[f64], x: &Vec4) -> Vec4 {
    let mut out = [0.0; D];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * D..(r + 1) * D];
        *o = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3] * x[3];
    }
    out
}

#[inline]
fn mat_t_vec(w: &[f64], g: &Vec4) -> Vec4 {
    let mut out = [0.0; D];
    for (r, &gr) in g.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += w[r * D + c] * gr;
        }
    }
    out
}

#[inline]
fn outer_acc(grad: &mut [f64], scale: f64, du: &Vec4, x: &Vec4) {
    for r in 0..D {
        let s = scale * du[r];
        for c in 0..D {
            grad[r * D + c] += s * x[c];
        }
    }
}

#[inline]
fn dot4(a: &Vec4, b: &Vec4) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
fn tanh4(u: Vec4) -> Vec4 {
    u.map(f64::tanh)
}

fn softmax_mix(alpha: &[f64]) -> Mix {
    let mut mix = [[0.0; N_OPS]; N_EDGES];
    for (e, m) in mix.iter_mut().enumerate() {
        let logits = &alpha[e * N_OPS..(e + 1) * N_OPS];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (mo, &l) in m.iter_mut().zip(logits) {
            *mo = (l - max).exp();
            total += *mo;
        }
        m.iter_mut().for_each(|mo| *mo /= total);
    }
    mix
}

fn one_hot_mix(arch: &Architecture) -> Mix {
    let mut mix = [[0.0; N_OPS]; N_EDGES];
    for (m, &op) in mix.iter_mut().zip(arch) {
        m[op] = 1.0;
    }
    mix
}

/// Softmax weights of each edge's logits, edge-major.
pub fn softmax_weights(alpha: &RealVector) -> Vec<[f64; N_OPS]> {
    softmax_mix(alpha.as_slice()).to_vec()
}

fn forward(w: &[f64], mix: &Mix, x: &Vec4) -> Activations {
    let mut a = Activations::default();
    let lin = |e: usize, v: &Vec4| mat_vec(&w[weight_offset(e, Op::Linear)..], v);
    let tanh_lin = |e: usize, v: &Vec4| tanh4(mat_vec(&w[weight_offset(e, Op::TanhLinear)..], v));

    if mix[0][2] != 0.0 {
        a.l01 = lin(0, x);
    }
    if mix[0][3] != 0.0 {
        a.h01 = tanh_lin(0, x);
    }
    for d in 0..D {
        a.x1[d] = mix[0][1] * x[d] + mix[0][2] * a.l01[d] + mix[0][3] * a.h01[d];
    }
    if mix[1][2] != 0.0 {
        a.l02 = lin(1, x);
    }
    if mix[1][3] != 0.0 {
        a.h02 = tanh_lin(1, x);
    }
    if mix[2][2] != 0.0 {
        a.l12 = lin(2, &a.x1);
    }
    if mix[2][3] != 0.0 {
        a.h12 = tanh_lin(2, &a.x1);
    }
    for d in 0..D {
        a.out[d] = mix[1][1] * x[d]
            + mix[1][2] * a.l02[d]
            + mix[1][3] * a.h02[d]
            + mix[2][1] * a.x1[d]
            + mix[2][2] * a.l12[d]
            + mix[2][3] * a.h12[d];
    }
    a
}

/// Accumulates `∂loss/∂w` and `∂loss/∂mix` for one sample given `g2 = ∂loss/∂X2`.
fn backward(w: &[f64], mix: &Mix, x: &Vec4, a: &Activations, g2: &Vec4, grad_w: &mut [f64], dmix: &mut Mix) {
    dmix[1][1] += dot4(g2, x);
    dmix[1][2] += dot4(g2, &a.l02);
    dmix[1][3] += dot4(g2, &a.h02);
    dmix[2][1] += dot4(g2, &a.x1);
    dmix[2][2] += dot4(g2, &a.l12);
    dmix[2][3] += dot4(g2, &a.h12);

    let o = weight_offset(1, Op::Linear);
    outer_acc(&mut grad_w[o..o + MAT], mix[1][2], g2, x);
    let du02: Vec4 = std::array::from_fn(|d| mix[1][3] * g2[d] * (1.0 - a.h02[d] * a.h02[d]));
    let o = weight_offset(1, Op::TanhLinear);
    outer_acc(&mut grad_w[o..o + MAT], 1.0, &du02, x);

    let ol = weight_offset(2, Op::Linear);
    outer_acc(&mut grad_w[ol..ol + MAT], mix[2][2], g2, &a.x1);
    let du12: Vec4 = std::array::from_fn(|d| mix[2][3] * g2[d] * (1.0 - a.h12[d] * a.h12[d]));
    let ot = weight_offset(2, Op::TanhLinear);
    outer_acc(&mut grad_w[ot..ot + MAT], 1.0, &du12, &a.x1);

    let back_lin = mat_t_vec(&w[ol..ol + MAT], g2);
    let back_tanh = mat_t_vec(&w[ot..ot + MAT], &du12);
    let g1: Vec4 = std::array::from_fn(|d| mix[2][1] * g2[d] + mix[2][2] * back_lin[d] + back_tanh[d]);

    dmix[0][1] += dot4(&g1, x);
    dmix[0][2] += dot4(&g1, &a.l01);
    dmix[0][3] += dot4(&g1, &a.h01);
    let o = weight_offset(0, Op::Linear);
    outer_acc(&mut grad_w[o..o + MAT], mix[0][2], &g1, x);
    let du01: Vec4 = std::array::from_fn(|d| mix[0][3] * g1[d] * (1.0 - a.h01[d] * a.h01[d]));
    let o = weight_offset(0, Op::TanhLinear);
    outer_acc(&mut grad_w[o..o + MAT], 1.0, &du01, x);
}

impl ToySupernet {
    pub fn new(config: SupernetConfig) -> Self {
        assert!(config.samples >= 2, "need at least one sample per split");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let teacher_dist = Normal::new(0.0, config.teacher_weight_std).expect("valid teacher std");
        let teacher_weights: Vec<f64> = (0..N_EDGES * PER_EDGE).map(|_| teacher_dist.sample(&mut rng)).collect();
        let x: Vec<Vec4> = (0..config.samples)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
            .collect();
        let noise = Normal::new(0.0, config.noise_std).expect("valid noise std");
        let teacher_mix = one_hot_mix(&config.teacher_ops);
        let y: Vec<Vec4> = x
            .iter()
            .map(|xi| {
                let clean = forward(&teacher_weights, &teacher_mix, xi).out;
                clean.map(|c| c + noise.sample(&mut rng))
            })
            .collect();
        let train_len = config.samples / 2;
        Self {
            config,
            x,
            y,
            train_len,
            teacher_weights,
        }
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn teacher_architecture(&self) -> Architecture {
        self.config.teacher_ops
    }

    pub fn teacher_weights(&self) -> &[f64] {
        &self.teacher_weights
    }

    pub fn layout() -> ArchLayout {
        ArchLayout {
            edges: N_EDGES,
            ops_per_edge: N_OPS,
        }
    }

    /// Targets of one split, flattened sample-major.
    pub fn targets(&self, split: Split) -> Vec<f64> {
        let range = self.split_range(split);
        self.y[range].iter().flatten().copied().collect()
    }

    fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_len,
            Split::Val => self.train_len..self.config.samples,
        }
    }

    /// Mean squared error over the selected rows and, if `grads`, the
    /// gradients with respect to `w` and the mixture weights.
    fn evaluate(&self, w: &[f64], mix: &Mix, split: Split, batch: Option<&Batch>, grads: bool) -> (f64, Vec<f64>, Mix) {
        let range = self.split_range(split);
        let offset = range.start;
        let rows: Box<dyn Iterator<Item = usize> + '_> = match batch {
            Some(b) => Box::new(b.indices().iter().map(move |&i| offset + i)),
            None => Box::new(range.clone()),
        };
        let count = batch.map_or(range.len(), Batch::len) as f64;
        let scale = 1.0 / (count * D as f64);
        let mut loss = 0.0;
        let mut grad_w = vec![0.0; if grads { N_EDGES * PER_EDGE } else { 0 }];
        let mut dmix = [[0.0; N_OPS]; N_EDGES];
        for i in rows {
            let x = &self.x[i];
            let act = forward(w, mix, x);
            let r: Vec4 = std::array::from_fn(|d| act.out[d] - self.y[i][d]);
            loss += dot4(&r, &r);
            if grads {
                let g2 = r.map(|v| 2.0 * scale * v);
                backward(w, mix, x, &act, &g2, &mut grad_w, &mut dmix);
            }
        }
        (loss * scale, grad_w, dmix)
    }

    fn loss_grads(&self, w: &RealVector, alpha: &RealVector, split: Split, batch: Option<&Batch>) -> Result<LossGrads> {
        check_point(self, w, alpha)?;
        check_batch(batch, split, self.split_len(split))?;
        let mix = softmax_mix(alpha.as_slice());
        let (loss, grad_w, dmix) = self.evaluate(w.as_slice(), &mix, split, batch, true);
        let mut grad_alpha = vec![0.0; N_EDGES * N_OPS];
        for e in 0..N_EDGES {
            let mean: f64 = (0..N_OPS).map(|o| mix[e][o] * dmix[e][o]).sum();
            for o in 0..N_OPS {
                grad_alpha[e * N_OPS + o] = mix[e][o] * (dmix[e][o] - mean);
            }
        }
        Ok(LossGrads {
            loss,
            grad_w: RealVector::new(grad_w)?,
            grad_alpha: RealVector::new(grad_alpha)?,
        })
    }

    /// Loss of a discrete architecture on a split.
    pub fn discrete_loss(&self, arch: &Architecture, w: &RealVector, split: Split) -> f64 {
        self.evaluate(w.as_slice(), &one_hot_mix(arch), split, None, false).0
    }

    /// Full-batch gradient descent on the train split for a discrete architecture.
    pub fn train_discrete(&self, arch: &Architecture, w0: &RealVector, steps: usize, lr: f64) -> Result<RealVector> {
        let mix = one_hot_mix(arch);
        let mut w = w0.as_slice().to_vec();
        for step in 0..steps {
            let (_, g, _) = self.evaluate(&w, &mix, Split::Train, None, true);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= lr * gi;
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::InnerDivergence { step });
            }
        }
        RealVector::new(w)
    }
}

impl BilevelProblem for ToySupernet {
    fn name(&self) -> &str {
        "toynas"
    }

    fn w_dim(&self) -> usize {
        N_EDGES * PER_EDGE
    }

    fn alpha_dim(&self) -> usize {
        N_EDGES * N_OPS
    }

    fn split_len(&self, split: Split) -> Option<usize> {
        Some(self.split_range(split).len())
    }

    fn inner_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads> {
        self.loss_grads(w, alpha, Split::Train, batch)
    }

    fn outer_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads> {
        self.loss_grads(w, alpha, Split::Val, batch)
    }

    fn hvp_inner_ww(
        &self,
        w: &RealVector,
        alpha: &RealVector,
        v: &RealVector,
        batch: Option<&Batch>,
    ) -> Result<RealVector> {
        hvp_numeric(self, w, alpha, v, batch, EpsilonRule::default())
    }

    fn as_supernet(&self) -> Option<&ToySupernet> {
        Some(self)
    }

    fn arch_layout(&self) -> Option<ArchLayout> {
        Some(Self::layout())
    }
}

/// A discrete architecture and its validation loss after standalone training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedArchitecture {
    pub architecture: Architecture,
    pub val_loss: f64,
}

/// Learning rate for standalone training in [`enumerate_and_rank`].
pub const STANDALONE_LR: f64 = 0.2;
/// Seed of the shared initialization in [`enumerate_and_rank`].
pub const STANDALONE_INIT_SEED: u64 = 0;

/// Trains all 64 discrete architectures from one shared seeded initialization
/// and returns them sorted by validation loss (ties broken by architecture).
pub fn enumerate_and_rank(problem: &ToySupernet, train_budget: usize) -> Result<Vec<RankedArchitecture>> {
    if train_budget < 500 {
        return Err(Error::contract("standalone training budget must be at least 500 steps"));
    }
    let w0 = problem.initial_state(STANDALONE_INIT_SEED).w;
    let mut ranked = Vec::with_capacity(N_OPS.pow(N_EDGES as u32));
    for a in 0..N_OPS {
        for b in 0..N_OPS {
            for c in 0..N_OPS {
                let arch = [a, b, c];
                let w = problem.train_discrete(&arch, &w0, train_budget, STANDALONE_LR)?;
                ranked.push(RankedArchitecture {
                    architecture: arch,
                    val_loss: problem.discrete_loss(&arch, &w, Split::Val),
                });
            }
        }
    }
    ranked.sort_by(|x, y| {
        x.val_loss
            .partial_cmp(&y.val_loss)
            .unwrap_or(Ordering::Equal)
            .then(x.architecture.cmp(&y.architecture))
    });
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_alpha_gives_quarter_weights() {
        let w = softmax_weights(&RealVector::zeros(12));
        for edge in w {
            assert!(edge.iter().all(|&p| p == 0.25));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let alpha = RealVector::new((0..12).map(|i| (i as f64 * 1.7).sin() * 30.0).collect()).unwrap();
        for edge in softmax_weights(&alpha) {
            assert!((edge.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = ToySupernet::new(SupernetConfig::default());
        let b = ToySupernet::new(SupernetConfig::default());
        let bits = |p: &ToySupernet| p.targets(Split::Val).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.split_len(Split::Train), Some(256));
        assert_eq!(a.split_len(Split::Val), Some(256));
    }

    #[test]
    fn zero_architecture_predicts_zero() {
        let p = ToySupernet::new(SupernetConfig::default());
        let w = p.initial_state(1).w;
        let y = p.targets(Split::Val);
        let mean_sq = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((p.discrete_loss(&[0, 0, 0], &w, Split::Val) - mean_sq).abs() < 1e-12);
    }

    #[test]
    fn teacher_weights_fit_to_noise_level() {
        let p = ToySupernet::new(SupernetConfig::default());
        let w = RealVector::from_slice(p.teacher_weights()).unwrap();
        let loss = p.discrete_loss(&p.teacher_architecture(), &w, Split::Train);
        // noise variance 1e-4 per coordinate
        assert!(loss < 2e-4, "teacher loss {loss}");
    }

    #[test]
    fn full_batch_equals_explicit_full_index_batch() {
        let p = ToySupernet::new(SupernetConfig::default());
        let s = p.initial_state(2);
        let alpha = RealVector::new((0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let full = p.inner_grads(&s.w, &alpha, None).unwrap();
        let all = Batch::full(Split::Train, 256);
        let explicit = p.inner_grads(&s.w, &alpha, Some(&all)).unwrap();
        assert_eq!(full.loss.to_bits(), explicit.loss.to_bits());
        assert!(full.grad_w.bit_eq(&explicit.grad_w));
        assert!(full.grad_alpha.bit_eq(&explicit.grad_alpha));
    }
}
