//! Oracle contract between problem families and the solver.
//!
//! A problem exposes `n` tasks over a shared outer variable `x` and per-task
//! inner variables `y_i`. Each task carries an outer objective `f_i(x, y_i)`
//! and a strongly convex inner objective `g_i(x, y_i)`; the solver only ever
//! talks to the problem through values, gradients, and Hessian-vector
//! products of these two functions.
//!
//! Stochasticity is explicit: every oracle takes a [`BatchHandle`] naming the
//! minibatch it must be evaluated on. Handles are plain data derived from a
//! seeded stream, so a given handle always denotes the same batch and the
//! whole pipeline stays replayable. The full-batch handle is distinguished
//! and always deterministic.

use crate::error::{check_task, MorbitError, Result};
use crate::state::IterateState;

/// Number of elements a batch draws from the task's data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchSize {
    /// The entire data source (or exact evaluation grid); never noisy.
    Full,
    /// A minibatch of the given size, identified by the handle's seed.
    Size(usize),
}

/// Opaque, replayable identifier of a minibatch for one task.
///
/// Two handles compare equal exactly when they denote the same batch. The
/// seed is drawn from the owning RNG stream at sampling time; oracles derive
/// batch contents (indices, sample points, or noise) from it deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchHandle {
    pub task: usize,
    pub seed: u64,
    pub size: BatchSize,
}

impl BatchHandle {
    /// The distinguished full-batch handle for a task.
    pub fn full(task: usize) -> Self {
        BatchHandle {
            task,
            seed: 0,
            size: BatchSize::Full,
        }
    }

    pub fn is_full(&self) -> bool {
        self.size == BatchSize::Full
    }
}

/// Draws a minibatch handle for `task` from that task's RNG stream.
///
/// Only the named task's stream advances, so draws for different tasks
/// commute and per-task sequences are independent of scheduling order.
pub fn sample_batch(state: &mut IterateState, task: usize, size: usize) -> Result<BatchHandle> {
    check_task(task, state.n_tasks())?;
    if size == 0 {
        return Err(MorbitError::domain("batch size must be at least 1"));
    }
    Ok(BatchHandle {
        task,
        seed: state.rng.next_task_seed(task),
        size: BatchSize::Size(size),
    })
}

/// Draws a minibatch handle for `task` from the shared outer-gradient stream.
///
/// The solver uses one such batch per task per iteration to evaluate outer
/// objectives and their gradients; keeping these draws on a dedicated stream
/// means inner-loop sampling never perturbs them.
pub fn sample_outer_batch(
    state: &mut IterateState,
    task: usize,
    size: usize,
) -> Result<BatchHandle> {
    check_task(task, state.n_tasks())?;
    if size == 0 {
        return Err(MorbitError::domain("batch size must be at least 1"));
    }
    Ok(BatchHandle {
        task,
        seed: state.rng.next_outer_seed(),
        size: BatchSize::Size(size),
    })
}

/// First- and second-order oracles for a multi-task bilevel problem.
///
/// Implementations must be deterministic given the batch handle and must not
/// hold interior mutability; `Send + Sync` lets runs over different seeds
/// proceed in parallel against one shared problem instance.
pub trait ProblemOracles: Send + Sync {
    fn n_tasks(&self) -> usize;

    /// Dimension of the shared outer variable.
    fn outer_dim(&self) -> usize;

    /// Dimension of task `i`'s inner variable.
    fn inner_dim(&self, task: usize) -> usize;

    /// Outer objective f_i(x, y_i) on the given batch.
    fn f_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64>;

    /// Gradient of f_i with respect to x.
    fn grad_x_f(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle)
        -> Result<Vec<f64>>;

    /// Gradient of f_i with respect to y_i.
    fn grad_y_f(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle)
        -> Result<Vec<f64>>;

    /// Inner objective g_i(x, y_i) on the given batch.
    fn g_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64>;

    /// Gradient of g_i with respect to y_i. This is the only oracle the
    /// built-in families perturb with sampled noise; the full-batch handle is
    /// always exact.
    fn grad_y_g(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle)
        -> Result<Vec<f64>>;

    /// Hessian-vector product with the inner Hessian: [d²g/dy²] v.
    fn hvp_yy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        v: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>>;

    /// Cross Hessian-vector product [d²g/dxdy] v, mapping an inner-space
    /// vector to an outer-space vector.
    fn hvp_xy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        v: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>>;

    /// Dense inner Hessian, if the family can produce one directly. When
    /// absent, exact solves assemble it column by column from `hvp_yy_g`.
    fn dense_hess_yy_g(
        &self,
        _task: usize,
        _x: &[f64],
        _y: &[f64],
        _batch: &BatchHandle,
    ) -> Option<crate::linalg::DenseMatrix> {
        None
    }

    /// Exact inner minimizer y_i*(x), when the family has a closed form.
    fn exact_inner_opt(&self, _task: usize, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Exact reduced objective l_i(x) = f_i(x, y_i*(x)), when available.
    fn exact_ell(&self, _task: usize, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Noise-free evaluation loss used for reporting (defaults to the
    /// full-batch outer objective; families with a held-out set override).
    fn true_loss(&self, task: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        self.f_value(task, x, y, &BatchHandle::full(task))
    }

    /// Default initial outer iterate.
    fn default_x0(&self) -> Vec<f64> {
        vec![0.0; self.outer_dim()]
    }

    /// Default initial inner iterate for task `i`.
    fn default_y0(&self, task: usize) -> Vec<f64> {
        vec![0.0; self.inner_dim(task)]
    }

    /// Subgradient of the generic weight penalty sum_blocks ||block||_2 on
    /// y_i; the default treats y_i as a single block. Families with
    /// structured inner variables may override the block split.
    fn weight_penalty_subgrad(&self, _task: usize, y: &[f64]) -> Vec<f64> {
        let n = crate::linalg::norm2(y);
        if n == 0.0 {
            vec![0.0; y.len()]
        } else {
            y.iter().map(|v| v / n).collect()
        }
    }

    /// Coefficient of the block-norm penalty baked into this family's
    /// `g_value`/`grad_y_g`, or 0 when the inner objective is smooth.
    ///
    /// A nonzero coefficient promises that
    /// `grad_y_g = (smooth gradient) + coeff · weight_penalty_subgrad`,
    /// letting iterative inner solvers split the penalty out and handle its
    /// kinks with the exact proximal map instead of subgradient steps (which
    /// cannot meet a gradient tolerance at a nonsmooth optimum).
    fn inner_penalty_coeff(&self, _task: usize) -> f64 {
        0.0
    }

    /// Proximal map of the penalty declared by [`inner_penalty_coeff`],
    /// applied in place: y <- argmin_u (penalty(u)·scale + ||u − y||²/2).
    /// The default matches the default subgradient (a single block), i.e.
    /// soft-thresholding of the whole vector's norm.
    ///
    /// [`inner_penalty_coeff`]: ProblemOracles::inner_penalty_coeff
    fn inner_penalty_prox(&self, _task: usize, y: &mut [f64], scale: f64) {
        let n = crate::linalg::norm2(y);
        let shrink = if n <= scale { 0.0 } else { (n - scale) / n };
        for v in y.iter_mut() {
            *v *= shrink;
        }
    }
}
