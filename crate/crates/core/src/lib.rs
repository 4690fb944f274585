//! Hypergradient estimation for bilevel optimization.
//!
//! The crate provides a family of estimators for `∇_α L2(w*(α), α)`, where
//! `w*(α)` minimizes an inner objective `L1(·, α)`: one-step unrolling,
//! identity and Neumann-series approximations of the inverse Hessian (full
//! batch and stochastic), conjugate gradient, exact implicit differentiation
//! and (truncated) reverse-mode unrolling. Around them sit a few desk-scale
//! problems with exact oracles, an alternating search loop, and executable
//! checks of the approximation theory.
//!
//! ```
//! use bihyper::estimators::{estimate, EstimatorBatches, EstimatorSpec};
//! use bihyper::numerics::RealVector;
//! use bihyper::problems::{BilevelState, QuadraticBilevel};
//!
//! let problem = QuadraticBilevel::scalar();
//! let state = BilevelState::new(RealVector::from_slice(&[0.5])?, RealVector::from_slice(&[1.0])?);
//! let spec = EstimatorSpec::neumann(3, 0.25);
//! let est = estimate(&problem, &state, &spec, &EstimatorBatches::full())?;
//! assert!((est.grad_alpha[0] + 0.234375).abs() < 1e-12);
//! # Ok::<(), bihyper::Error>(())
//! ```

// `!(x > 0.0)` is how NaN gets rejected; fixed-size index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod derivatives;
pub mod error;
pub mod estimators;
pub mod numerics;
pub mod problems;
pub mod search;
pub mod verify;

pub use error::{Error, Result};
