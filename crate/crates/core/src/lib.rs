//! Min-max multi-objective bilevel optimization.
//!
//! The library solves problems of the form
//!
//!   min over x in X of max over simplex weights lambda of
//!       sum_i lambda_i f_i(x, y_i*(x)),
//!   where y_i*(x) = argmin over y_i of g_i(x, y_i),
//!
//! with a single-loop stochastic scheme: every iteration takes one (or a
//! few) descent steps on each inner problem, one projected descent step on
//! x against the weighted implicit gradient, and one projected ascent step
//! on the simplex weights. Step sizes may be supplied manually or derived
//! from the problem's regularity constants so that the three timescales are
//! rate-matched.
//!
//! Modules:
//! - [`oracles`], [`state`], [`constants`]: the problem contract, seeded
//!   iterate state, and regularity data.
//! - [`projections`]: simplex and constraint-set projections.
//! - [`hypergrad`]: implicit outer gradients (dense, conjugate-gradient,
//!   and first-order estimators).
//! - [`solver`]: the single-loop scheme, its step-size schedules, and the
//!   model-agnostic training loop.
//! - [`problems`]: built-in problem families (quadratic, sinusoid
//!   regression with a shared embedding, linear representation learning)
//!   and an IDX data loader.
//! - [`diagnostics`]: convergence gaps, proximal stationarity, rate fits,
//!   and unseen-task evaluation.
//! - [`check`]: finite-difference consistency sweeps for oracles.

pub mod check;
pub mod constants;
pub mod diagnostics;
pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod oracles;
pub mod problems;
pub mod projections;
pub mod schedule;
pub mod solver;
pub mod state;

pub use error::{MorbitError, Result};
pub use oracles::{BatchHandle, BatchSize, ProblemOracles};
pub use state::{ConstraintSet, IterateState, RngStreams};
