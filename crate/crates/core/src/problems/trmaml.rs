//! Proximal inner construction: robust MAML-style task adaptation.
//!
//! Given per-task losses l_i over the same parameter space as x, the inner
//! objective becomes
//!
//!   g_i(x, y) = l_i(y) + (eta/2) ||x - y||^2,
//!
//! whose minimizer is the proximal map of l_i/eta at x. Running the min-max
//! solver on this problem reproduces robust meta-learning with proximal
//! adaptation: each task adapts parameters near the shared initialization x,
//! and the outer objective is the adapted loss l_i(y_i*(x)).

use crate::error::{check_len, MorbitError, Result};
use crate::linalg::{axpy, norm2_sq, sub, DenseMatrix};
use crate::oracles::{BatchHandle, ProblemOracles};

/// A smooth per-task loss with the oracles the proximal construction needs.
pub trait InnerLoss: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, y: &[f64]) -> f64;
    fn grad(&self, y: &[f64]) -> Vec<f64>;
    fn hvp(&self, y: &[f64], v: &[f64]) -> Vec<f64>;
    /// Exact minimizer of value(y) + (eta/2)||x - y||^2, when available.
    fn prox_exact(&self, _x: &[f64], _eta: f64) -> Option<Vec<f64>> {
        None
    }
}

/// l(y) = 1/2 y'Qy with symmetric positive semidefinite Q; the proximal
/// term makes the inner objective strongly convex even for Q = 0.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    q: DenseMatrix,
    q_is_zero: bool,
}

impl QuadraticLoss {
    pub fn new(q: DenseMatrix) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(MorbitError::Shape {
                what: "quadratic loss matrix",
                expected: q.rows(),
                got: q.cols(),
            });
        }
        if q.asymmetry() > 1e-12 {
            return Err(MorbitError::domain("quadratic loss matrix must be symmetric"));
        }
        let q_is_zero = (0..q.rows()).all(|i| (0..q.cols()).all(|j| q.get(i, j) == 0.0));
        Ok(Self { q, q_is_zero })
    }
}

impl InnerLoss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.q.rows()
    }

    fn value(&self, y: &[f64]) -> f64 {
        0.5 * crate::linalg::dot(y, &self.q.matvec(y))
    }

    fn grad(&self, y: &[f64]) -> Vec<f64> {
        self.q.matvec(y)
    }

    fn hvp(&self, _y: &[f64], v: &[f64]) -> Vec<f64> {
        self.q.matvec(v)
    }

    fn prox_exact(&self, x: &[f64], eta: f64) -> Option<Vec<f64>> {
        // argmin 1/2 y'Qy + eta/2 ||x-y||^2 solves (Q + eta I) y = eta x;
        // Q = 0 short-circuits so the pure proximal map is the identity
        // without roundoff from the factorization
        if self.q_is_zero {
            return Some(x.to_vec());
        }
        let d = self.q.rows();
        let reg = DenseMatrix::from_fn(d, d, |i, j| {
            self.q.get(i, j) + if i == j { eta } else { 0.0 }
        });
        let rhs: Vec<f64> = x.iter().map(|v| eta * v).collect();
        reg.cholesky().ok().map(|f| f.solve(&rhs))
    }
}

/// The proximal bilevel problem over a shared parameter vector.
pub struct TrMamlProblem {
    losses: Vec<Box<dyn InnerLoss>>,
    eta: f64,
    dim: usize,
}

/// Builds the proximal construction from per-task losses. All losses must
/// live on the same space as the shared parameters (dimension of loss 0).
pub fn trmaml_inner(losses: Vec<Box<dyn InnerLoss>>, eta: f64) -> Result<TrMamlProblem> {
    if losses.is_empty() {
        return Err(MorbitError::domain("at least one task loss is required"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(MorbitError::domain(format!(
            "proximal strength eta must be positive and finite, got {eta}"
        )));
    }
    let dim = losses[0].dim();
    for (i, l) in losses.iter().enumerate() {
        if l.dim() != dim {
            return Err(MorbitError::Shape {
                what: "task loss dimension",
                expected: dim,
                got: l.dim(),
            }
            .for_task(i));
        }
    }
    Ok(TrMamlProblem { losses, eta, dim })
}

impl TrMamlProblem {
    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl ProblemOracles for TrMamlProblem {
    fn n_tasks(&self) -> usize {
        self.losses.len()
    }

    fn outer_dim(&self) -> usize {
        self.dim
    }

    fn inner_dim(&self, _task: usize) -> usize {
        self.dim
    }

    fn f_value(&self, task: usize, x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<f64> {
        crate::error::check_task(task, self.losses.len())?;
        check_len("x", x, self.dim)?;
        check_len("y", y, self.dim)?;
        Ok(self.losses[task].value(y))
    }

    fn grad_x_f(&self, task: usize, _x: &[f64], _y: &[f64], _batch: &BatchHandle) -> Result<Vec<f64>> {
        crate::error::check_task(task, self.losses.len())?;
        Ok(vec![0.0; self.dim])
    }

    fn grad_y_f(&self, task: usize, _x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<Vec<f64>> {
        crate::error::check_task(task, self.losses.len())?;
        Ok(self.losses[task].grad(y))
    }

    fn g_value(&self, task: usize, x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<f64> {
        crate::error::check_task(task, self.losses.len())?;
        Ok(self.losses[task].value(y) + 0.5 * self.eta * norm2_sq(&sub(x, y)))
    }

    fn grad_y_g(&self, task: usize, x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<Vec<f64>> {
        crate::error::check_task(task, self.losses.len())?;
        check_len("x", x, self.dim)?;
        check_len("y", y, self.dim)?;
        let mut g = self.losses[task].grad(y);
        for i in 0..self.dim {
            g[i] += self.eta * (y[i] - x[i]);
        }
        Ok(g)
    }

    fn hvp_yy_g(
        &self,
        task: usize,
        _x: &[f64],
        _y: &[f64],
        v: &[f64],
        _batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        crate::error::check_task(task, self.losses.len())?;
        let mut h = self.losses[task].hvp(_y, v);
        axpy(&mut h, self.eta, v);
        Ok(h)
    }

    fn hvp_xy_g(
        &self,
        task: usize,
        _x: &[f64],
        _y: &[f64],
        v: &[f64],
        _batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        crate::error::check_task(task, self.losses.len())?;
        // d(grad_y_g)/dx = -eta I
        Ok(v.iter().map(|vi| -self.eta * vi).collect())
    }

    fn exact_inner_opt(&self, task: usize, x: &[f64]) -> Option<Vec<f64>> {
        self.losses[task].prox_exact(x, self.eta)
    }

    fn exact_ell(&self, task: usize, x: &[f64]) -> Option<f64> {
        let y = self.exact_inner_opt(task, x)?;
        Some(self.losses[task].value(&y))
    }
}
