//! Quadratic bilevel family with closed-form everything.
//!
//! Task i couples a strongly convex inner quadratic to a quadratic outer
//! tracking loss:
//!
//!   g_i(x, y) = 1/2 y'A_i y - y'(B_i x + c_i),
//!   f_i(x, y) = 1/2 ||y - t_i||^2,
//!
//! so y_i*(x) = A_i^{-1}(B_i x + c_i), l_i(x) = 1/2 ||y_i*(x) - t_i||^2, and
//! grad l_i(x) = B_i' A_i^{-1} (y_i*(x) - t_i). Every estimator in the
//! library can therefore be checked against exact values on this family.
//!
//! The stochastic mode perturbs `grad_y_g` with seeded Gaussian noise of
//! scale `noise_sigma * (1 + ||grad_y_g||)`, matching the variance model the
//! step-size analysis assumes. The full-batch handle is always exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, check_task, MorbitError, Result};
use crate::linalg::{axpy, norm2, norm2_sq, sub, CholeskyFactor, DenseMatrix};
use crate::oracles::{BatchHandle, ProblemOracles};

/// One task of the quadratic family.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    /// Symmetric positive definite inner Hessian (d2 x d2).
    pub a: DenseMatrix,
    /// Inner coupling matrix (d2 x d1).
    pub b: DenseMatrix,
    /// Inner linear term (d2).
    pub c: Vec<f64>,
    /// Outer target (d2).
    pub t: Vec<f64>,
}

/// Specification of a quadratic bilevel instance.
#[derive(Debug, Clone)]
pub struct QuadraticBilevelSpec {
    pub tasks: Vec<QuadraticTask>,
    /// Scale of the seeded minibatch noise on the inner gradients.
    pub noise_sigma: f64,
}

/// Validated instance with precomputed inner factorizations.
#[derive(Debug)]
pub struct QuadraticProblem {
    tasks: Vec<QuadraticTask>,
    factors: Vec<CholeskyFactor>,
    d1: usize,
    noise_sigma: f64,
}

/// Validates the spec and precomputes the inner Cholesky factors.
pub fn quadratic_oracles(spec: QuadraticBilevelSpec) -> Result<QuadraticProblem> {
    if spec.tasks.is_empty() {
        return Err(MorbitError::domain("at least one task is required"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(MorbitError::domain("noise_sigma must be nonnegative"));
    }
    let d1 = spec.tasks[0].b.cols();
    let mut factors = Vec::with_capacity(spec.tasks.len());
    for (i, task) in spec.tasks.iter().enumerate() {
        let d2 = task.a.rows();
        if task.a.cols() != d2 || task.b.rows() != d2 || task.b.cols() != d1 {
            return Err(MorbitError::Shape {
                what: "quadratic task matrices",
                expected: d2,
                got: task.b.rows(),
            });
        }
        check_len("c", &task.c, d2).map_err(|e| e.for_task(i))?;
        check_len("t", &task.t, d2).map_err(|e| e.for_task(i))?;
        if task.a.asymmetry() > 1e-12 {
            return Err(MorbitError::domain(format!(
                "task {i}: inner Hessian is not symmetric (asymmetry {:.3e})",
                task.a.asymmetry()
            )));
        }
        let factor = task
            .a
            .cholesky()
            .map_err(|e| e.for_task(i))?;
        factors.push(factor);
    }
    Ok(QuadraticProblem {
        d1,
        factors,
        noise_sigma: spec.noise_sigma,
        tasks: spec.tasks,
    })
}

impl QuadraticProblem {
    pub fn task(&self, i: usize) -> &QuadraticTask {
        &self.tasks[i]
    }

    /// Exact minimizer of l(x, lambda) = sum_i lambda_i l_i(x): solves the
    /// normal equations of the stacked weighted least-squares problem.
    /// Used by diagnostics tests; x enters l_i through J_i = A_i^{-1} B_i.
    pub fn weighted_outer_opt(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        let d1 = self.d1;
        let mut lhs = DenseMatrix::zeros(d1, d1);
        let mut rhs = vec![0.0; d1];
        for (i, task) in self.tasks.iter().enumerate() {
            // J = A^{-1}B column by column
            let mut j_cols = Vec::with_capacity(d1);
            for col in 0..d1 {
                let b_col: Vec<f64> = (0..task.b.rows()).map(|r| task.b.get(r, col)).collect();
                j_cols.push(self.factors[i].solve(&b_col));
            }
            let base = self.factors[i].solve(&task.c);
            let resid = sub(&task.t, &base);
            for p in 0..d1 {
                rhs[p] += lambda[i] * crate::linalg::dot(&j_cols[p], &resid);
                for q in 0..d1 {
                    let v = lhs.get(p, q) + lambda[i] * crate::linalg::dot(&j_cols[p], &j_cols[q]);
                    lhs.set(p, q, v);
                }
            }
        }
        Ok(lhs.cholesky()?.solve(&rhs))
    }

    fn noise(&self, task: usize, batch: &BatchHandle, grad: &mut [f64]) {
        if self.noise_sigma == 0.0 || batch.is_full() {
            return;
        }
        // direction is a function of the handle alone, so a replayed handle
        // reproduces the same perturbation
        let mut rng = ChaCha8Rng::seed_from_u64(batch.seed ^ (task as u64).wrapping_mul(0x9e37_79b9));
        let scale = self.noise_sigma * (1.0 + norm2(grad)) / (grad.len() as f64).sqrt();
        for g in grad.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *g += scale * z;
        }
    }

    fn raw_grad_y_g(&self, task: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let t = &self.tasks[task];
        let mut g = t.a.matvec(y);
        let mut bx = t.b.matvec(x);
        axpy(&mut bx, 1.0, &t.c);
        axpy(&mut g, -1.0, &bx);
        g
    }
}

impl ProblemOracles for QuadraticProblem {
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn outer_dim(&self) -> usize {
        self.d1
    }

    fn inner_dim(&self, task: usize) -> usize {
        self.tasks[task].a.rows()
    }

    fn f_value(&self, task: usize, x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<f64> {
        check_task(task, self.tasks.len())?;
        check_len("x", x, self.d1)?;
        check_len("y", y, self.inner_dim(task))?;
        Ok(0.5 * norm2_sq(&sub(y, &self.tasks[task].t)))
    }

    fn grad_x_f(&self, task: usize, x: &[f64], _y: &[f64], _batch: &BatchHandle) -> Result<Vec<f64>> {
        check_task(task, self.tasks.len())?;
        check_len("x", x, self.d1)?;
        Ok(vec![0.0; self.d1])
    }

    fn grad_y_f(&self, task: usize, _x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<Vec<f64>> {
        check_task(task, self.tasks.len())?;
        Ok(sub(y, &self.tasks[task].t))
    }

    fn g_value(&self, task: usize, x: &[f64], y: &[f64], _batch: &BatchHandle) -> Result<f64> {
        check_task(task, self.tasks.len())?;
        let t = &self.tasks[task];
        let ay = t.a.matvec(y);
        let mut bx = t.b.matvec(x);
        axpy(&mut bx, 1.0, &t.c);
        Ok(0.5 * crate::linalg::dot(y, &ay) - crate::linalg::dot(y, &bx))
    }

    fn grad_y_g(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<Vec<f64>> {
        check_task(task, self.tasks.len())?;
        check_len("x", x, self.d1)?;
        check_len("y", y, self.inner_dim(task))?;
        let mut g = self.raw_grad_y_g(task, x, y);
        self.noise(task, batch, &mut g);
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
        check_task(task, self.tasks.len())?;
        Ok(self.tasks[task].a.matvec(v))
    }

    fn hvp_xy_g(
        &self,
        task: usize,
        _x: &[f64],
        _y: &[f64],
        v: &[f64],
        _batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        check_task(task, self.tasks.len())?;
        // grad_y_g = Ay - Bx - c, so the cross Hessian applied to v is -B'v
        let mut out = self.tasks[task].b.t_matvec(v);
        crate::linalg::scale(&mut out, -1.0);
        Ok(out)
    }

    fn dense_hess_yy_g(
        &self,
        task: usize,
        _x: &[f64],
        _y: &[f64],
        _batch: &BatchHandle,
    ) -> Option<DenseMatrix> {
        Some(self.tasks[task].a.clone())
    }

    fn exact_inner_opt(&self, task: usize, x: &[f64]) -> Option<Vec<f64>> {
        let t = &self.tasks[task];
        let mut bx = t.b.matvec(x);
        axpy(&mut bx, 1.0, &t.c);
        Some(self.factors[task].solve(&bx))
    }

    fn exact_ell(&self, task: usize, x: &[f64]) -> Option<f64> {
        let y_star = self.exact_inner_opt(task, x)?;
        Some(0.5 * norm2_sq(&sub(&y_star, &self.tasks[task].t)))
    }
}

/// Seeded random instance with controlled regularity: every inner Hessian is
/// I + S with S positive semidefinite of unit spectral norm (so curvature
/// lies in [1, 2]), couplings are normalized to unit spectral norm, and
/// linear terms and targets are modest. The companion constants for the
/// derived step-size schedule are therefore mu_g = 1, l_g = 2, g_y = 1.
pub fn seeded_instance(
    n: usize,
    d1: usize,
    d2: usize,
    seed: u64,
    noise_sigma: f64,
    target_spread: f64,
) -> Result<QuadraticBilevelSpec> {
    use rand::Rng;
    if n == 0 || d1 == 0 || d2 == 0 {
        return Err(MorbitError::domain("dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n);
    for _ in 0..n {
        let m = DenseMatrix::from_fn(d2, d2, |_, _| rng.gen_range(-1.0..1.0));
        // S = MM' scaled to unit spectral norm
        let mut s = DenseMatrix::zeros(d2, d2);
        for i in 0..d2 {
            for j in 0..d2 {
                let mut acc = 0.0;
                for k in 0..d2 {
                    acc += m.get(i, k) * m.get(j, k);
                }
                s.set(i, j, acc);
            }
        }
        let spec_norm = spectral_norm_sym(&s);
        let a = DenseMatrix::from_fn(d2, d2, |i, j| {
            s.get(i, j) / spec_norm + if i == j { 1.0 } else { 0.0 }
        });
        let b_raw = DenseMatrix::from_fn(d2, d1, |_, _| rng.gen_range(-1.0..1.0));
        let b_norm = spectral_norm_rect(&b_raw);
        let b = DenseMatrix::from_fn(d2, d1, |i, j| b_raw.get(i, j) / b_norm);
        let c = (0..d2).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let t = (0..d2)
            .map(|_| rng.gen_range(-target_spread..target_spread))
            .collect();
        tasks.push(QuadraticTask { a, b, c, t });
    }
    Ok(QuadraticBilevelSpec { tasks, noise_sigma })
}

fn spectral_norm_sym(s: &DenseMatrix) -> f64 {
    // power iteration; symmetric input, generous iteration count
    let n = s.rows();
    let mut v = vec![1.0; n];
    let mut lam = 1.0;
    for _ in 0..200 {
        let w = s.matvec(&v);
        lam = norm2(&w);
        if lam == 0.0 {
            return 1.0;
        }
        v = w.iter().map(|x| x / lam).collect();
    }
    lam.max(1e-12)
}

fn spectral_norm_rect(b: &DenseMatrix) -> f64 {
    // power iteration on B'B
    let n = b.cols();
    let mut v = vec![1.0; n];
    let mut lam = 1.0;
    for _ in 0..200 {
        let w = b.t_matvec(&b.matvec(&v));
        lam = norm2(&w);
        if lam == 0.0 {
            return 1.0;
        }
        v = w.iter().map(|x| x / lam).collect();
    }
    lam.sqrt().max(1e-12)
}
