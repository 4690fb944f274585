//! Ridge regression with per-feature log regularization strengths as the
//! outer parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{check_batch, check_point, Batch, BilevelProblem, LossGrads, Split};
use crate::error::{Error, Result};
use crate::numerics::{RealMatrix, RealVector};

/// α is clamped to this range before exponentiation.
pub const LOG_REG_CLAMP: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct RidgeHyperopt {
    name: String,
    x_train: RealMatrix,
    y_train: RealVector,
    x_val: RealMatrix,
    y_val: RealVector,
}

fn reg_strength(alpha: f64) -> (f64, f64) {
    // (exp(clamped α), derivative factor)
    let clamped = alpha.clamp(-LOG_REG_CLAMP, LOG_REG_CLAMP);
    let active = if alpha.abs() <= LOG_REG_CLAMP { 1.0 } else { 0.0 };
    (clamped.exp(), active)
}

impl RidgeHyperopt {
    pub fn new(x_train: RealMatrix, y_train: RealVector, x_val: RealMatrix, y_val: RealVector) -> Result<Self> {
        if x_train.rows() != y_train.len() {
            return Err(Error::Dimension {
                context: "train targets",
                expected: x_train.rows(),
                found: y_train.len(),
            });
        }
        if x_val.rows() != y_val.len() {
            return Err(Error::Dimension {
                context: "val targets",
                expected: x_val.rows(),
                found: y_val.len(),
            });
        }
        if x_train.cols() != x_val.cols() {
            return Err(Error::Dimension {
                context: "feature count",
                expected: x_train.cols(),
                found: x_val.cols(),
            });
        }
        Ok(Self {
            name: "ridge".into(),
            x_train,
            y_train,
            x_val,
            y_val,
        })
    }

    /// The `ridge-20f` preset: 20 features, 50 train and 50 val samples,
    /// half of the true coefficients zero.
    pub fn preset_20f() -> Self {
        let mut p = Self::synthetic(20, 50, 50, 0.5, 20_210_920);
        p.name = "ridge-20f".into();
        p
    }

    pub fn synthetic(features: usize, n_train: usize, n_val: usize, noise_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..features)
            .map(|f| {
                let b: f64 = StandardNormal.sample(&mut rng);
                if f % 2 == 0 { b } else { 0.0 }
            })
            .collect();
        let noise = Normal::new(0.0, noise_std).expect("valid noise std");
        let mut draw = |n: usize| {
            let x: Vec<f64> = (0..n * features).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let row = &x[i * features..(i + 1) * features];
                    row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + noise.sample(&mut rng)
                })
                .collect();
            (
                RealMatrix::new(n, features, x).unwrap(),
                RealVector::new(y).unwrap(),
            )
        };
        let (x_train, y_train) = draw(n_train);
        let (x_val, y_val) = draw(n_val);
        Self::new(x_train, y_train, x_val, y_val).expect("consistent synthetic data")
    }

    fn rows<'a>(x: &'a RealMatrix, batch: Option<&'a Batch>) -> Box<dyn Iterator<Item = usize> + 'a> {
        match batch {
            Some(b) => Box::new(b.indices().iter().copied()),
            None => Box::new(0..x.rows()),
        }
    }

    fn batch_count(x: &RealMatrix, batch: Option<&Batch>) -> f64 {
        batch.map_or(x.rows(), Batch::len) as f64
    }

    /// `½‖X_b w − y_b‖² / |b|` and its gradient in `w`.
    fn data_term(x: &RealMatrix, y: &RealVector, w: &RealVector, batch: Option<&Batch>) -> (f64, Vec<f64>) {
        let n = Self::batch_count(x, batch);
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        for i in Self::rows(x, batch) {
            let row = x.row(i);
            let r: f64 = row.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() - y[i];
            loss += 0.5 * r * r;
            for (g, &xi) in grad.iter_mut().zip(row) {
                *g += r * xi;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl BilevelProblem for RidgeHyperopt {
    fn name(&self) -> &str {
        &self.name
    }

    fn w_dim(&self) -> usize {
        self.x_train.cols()
    }

    fn alpha_dim(&self) -> usize {
        self.x_train.cols()
    }

    fn split_len(&self, split: Split) -> Option<usize> {
        Some(match split {
            Split::Train => self.x_train.rows(),
            Split::Val => self.x_val.rows(),
        })
    }

    fn inner_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads> {
        check_point(self, w, alpha)?;
        check_batch(batch, Split::Train, self.split_len(Split::Train))?;
        let (mut loss, mut grad_w) = Self::data_term(&self.x_train, &self.y_train, w, batch);
        let mut grad_alpha = vec![0.0; alpha.len()];
        for f in 0..w.len() {
            let (s, active) = reg_strength(alpha[f]);
            loss += 0.5 * s * w[f] * w[f];
            grad_w[f] += s * w[f];
            grad_alpha[f] = 0.5 * s * active * w[f] * w[f];
        }
        Ok(LossGrads {
            loss,
            grad_w: RealVector::new(grad_w)?,
            grad_alpha: RealVector::new(grad_alpha)?,
        })
    }

    fn outer_grads(&self, w: &RealVector, alpha: &RealVector, batch: Option<&Batch>) -> Result<LossGrads> {
        check_point(self, w, alpha)?;
        check_batch(batch, Split::Val, self.split_len(Split::Val))?;
        let (loss, grad_w) = Self::data_term(&self.x_val, &self.y_val, w, batch);
        Ok(LossGrads {
            loss,
            grad_w: RealVector::new(grad_w)?,
            grad_alpha: RealVector::zeros(alpha.len()),
        })
    }

    fn hvp_inner_ww(
        &self,
        w: &RealVector,
        alpha: &RealVector,
        v: &RealVector,
        batch: Option<&Batch>,
    ) -> Result<RealVector> {
        check_point(self, v, alpha)?;
        check_point(self, w, alpha)?;
        check_batch(batch, Split::Train, self.split_len(Split::Train))?;
        let n = Self::batch_count(&self.x_train, batch);
        let mut out = vec![0.0; v.len()];
        for i in Self::rows(&self.x_train, batch) {
            let row = self.x_train.row(i);
            let xv: f64 = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            for (o, &xi) in out.iter_mut().zip(row) {
                *o += xv * xi;
            }
        }
        for (f, o) in out.iter_mut().enumerate() {
            *o = *o / n + reg_strength(alpha[f]).0 * v[f];
        }
        RealVector::new(out)
    }

    fn mixed_product_analytic(&self, w: &RealVector, alpha: &RealVector, v: &RealVector) -> Result<RealVector> {
        check_point(self, w, alpha)?;
        check_point(self, v, alpha)?;
        let out: Vec<f64> = (0..w.len())
            .map(|f| {
                let (s, active) = reg_strength(alpha[f]);
                s * active * w[f] * v[f]
            })
            .collect();
        RealVector::new(out)
    }

    fn dense_inner_hessian(
        &self,
        _w: &RealVector,
        alpha: &RealVector,
        batch: Option<&Batch>,
    ) -> Option<Result<RealMatrix>> {
        let build = || -> Result<RealMatrix> {
            check_batch(batch, Split::Train, self.split_len(Split::Train))?;
            let f = self.w_dim();
            let n = Self::batch_count(&self.x_train, batch);
            let mut h = vec![0.0; f * f];
            for i in Self::rows(&self.x_train, batch) {
                let row = self.x_train.row(i);
                for a in 0..f {
                    for b in 0..f {
                        h[a * f + b] += row[a] * row[b];
                    }
                }
            }
            for a in 0..f {
                for b in 0..f {
                    h[a * f + b] /= n;
                }
                h[a * f + a] += reg_strength(alpha[a]).0;
            }
            RealMatrix::new(f, f, h)
        };
        Some(build())
    }
}
