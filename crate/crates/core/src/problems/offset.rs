//! Adapter adding a constant to each task's outer objective.
//!
//! Shifting f_i by a constant changes none of the gradients, only the values
//! the weight ascent sees, which makes it easy to construct instances where
//! one task dominates the maximum by an exact margin.

use crate::error::{check_task, Result};
use crate::linalg::DenseMatrix;
use crate::oracles::{BatchHandle, ProblemOracles};

pub struct WithOuterOffsets<P> {
    inner: P,
    offsets: Vec<f64>,
}

impl<P: ProblemOracles> WithOuterOffsets<P> {
    pub fn new(inner: P, offsets: Vec<f64>) -> Result<Self> {
        crate::error::check_len("offsets", &offsets, inner.n_tasks())?;
        Ok(Self { inner, offsets })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: ProblemOracles> ProblemOracles for WithOuterOffsets<P> {
    fn n_tasks(&self) -> usize {
        self.inner.n_tasks()
    }

    fn outer_dim(&self) -> usize {
        self.inner.outer_dim()
    }

    fn inner_dim(&self, task: usize) -> usize {
        self.inner.inner_dim(task)
    }

    fn f_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64> {
        check_task(task, self.offsets.len())?;
        Ok(self.inner.f_value(task, x, y, batch)? + self.offsets[task])
    }

    fn grad_x_f(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<Vec<f64>> {
        self.inner.grad_x_f(task, x, y, batch)
    }

    fn grad_y_f(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<Vec<f64>> {
        self.inner.grad_y_f(task, x, y, batch)
    }

    fn g_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64> {
        self.inner.g_value(task, x, y, batch)
    }

    fn grad_y_g(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<Vec<f64>> {
        self.inner.grad_y_g(task, x, y, batch)
    }

    fn hvp_yy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        v: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        self.inner.hvp_yy_g(task, x, y, v, batch)
    }

    fn hvp_xy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        v: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        self.inner.hvp_xy_g(task, x, y, v, batch)
    }

    fn dense_hess_yy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Option<DenseMatrix> {
        self.inner.dense_hess_yy_g(task, x, y, batch)
    }

    fn exact_inner_opt(&self, task: usize, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.exact_inner_opt(task, x)
    }

    fn exact_ell(&self, task: usize, x: &[f64]) -> Option<f64> {
        Some(self.inner.exact_ell(task, x)? + self.offsets[task])
    }

    fn true_loss(&self, task: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.inner.true_loss(task, x, y)? + self.offsets[task])
    }

    fn default_x0(&self) -> Vec<f64> {
        self.inner.default_x0()
    }

    fn default_y0(&self, task: usize) -> Vec<f64> {
        self.inner.default_y0(task)
    }
}
