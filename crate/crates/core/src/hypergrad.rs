//! Implicit outer gradients.
//!
//! With a strongly convex inner objective, the gradient of the reduced
//! objective l_i(x) = f_i(x, y_i*(x)) evaluated at an approximate inner
//! solution y is
//!
//!   grad_bar f_i(x, y) = grad_x f_i - [d²g/dxdy] [d²g/dy²]^{-1} grad_y f_i,
//!
//! which needs one linear solve against the inner Hessian per task. Three
//! estimator modes trade accuracy for cost: a dense factorization, a
//! matrix-free conjugate-gradient solve, and a first-order mode that drops
//! the correction term entirely and owns up to the bias it introduces.

use crate::check::{central_diff_grad, max_rel_err};
use crate::error::{check_len, MorbitError, Result};
use crate::linalg::{axpy, dot, norm2, DenseMatrix};
use crate::oracles::{BatchHandle, ProblemOracles};

/// Largest inner dimension the dense mode will factorize.
pub const DENSE_CUTOFF: usize = 512;

/// Absolute floor under the relative conjugate-gradient tolerance, so a
/// tiny right-hand side cannot demand sub-epsilon residuals.
pub const CG_ABS_FLOOR: f64 = 1e-12;

/// How the inner-Hessian solve is carried out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HypergradMode {
    /// Dense Cholesky solve; exact up to factorization roundoff.
    ExactSolve,
    /// Matrix-free conjugate gradient with relative tolerance `tol`.
    Cg { tol: f64, max_iter: usize },
    /// Drop the correction term; `declared_bias` is the caller's bound on
    /// the norm of the neglected term.
    FirstOrder { declared_bias: f64 },
}

/// An implicit-gradient estimate with its quality metadata.
#[derive(Debug, Clone)]
pub struct HypergradEstimate {
    pub grad: Vec<f64>,
    pub mode: HypergradMode,
    /// Final linear-solve residual norm (0 for exact and first-order modes).
    pub solve_residual: f64,
    /// Bound on the systematic error: 0 for exact solves, the achieved
    /// residual norm for conjugate gradient, the declared bound for
    /// first-order mode. Weighted estimates carry the weighted sum.
    pub bias_bound: f64,
}

/// Solves H z = b with H given only through Hessian-vector products.
/// Terminates when ||r|| <= max(tol * ||b||, CG_ABS_FLOOR); a direction of
/// nonpositive curvature fails the strong-convexity contract and a spent
/// iteration budget reports the residual it got stuck at.
pub fn cg_solve(
    mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64)> {
    if !(tol > 0.0) {
        return Err(MorbitError::domain("cg tolerance must be positive"));
    }
    let n = b.len();
    let threshold = (tol * norm2(b)).max(CG_ABS_FLOOR);
    let mut z = vec![0.0; n];
    let mut r = b.to_vec();
    let mut rs = dot(&r, &r);
    if rs.sqrt() <= threshold {
        return Ok((z, rs.sqrt()));
    }
    let mut p = r.clone();
    for _ in 0..max_iter {
        let hp = hvp(&p)?;
        let curvature = dot(&p, &hp);
        if curvature <= 0.0 {
            return Err(MorbitError::NotStronglyConvex(format!(
                "conjugate gradient found curvature {curvature:.3e} along a search direction"
            )));
        }
        let alpha = rs / curvature;
        axpy(&mut z, alpha, &p);
        axpy(&mut r, -alpha, &hp);
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= threshold {
            return Ok((z, rs_new.sqrt()));
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(MorbitError::SolveDiverged {
        residual: rs.sqrt(),
        tol: threshold,
        iters: max_iter,
    })
}

/// Implicit outer gradient for one task at (x, y) on the given batch.
pub fn task_hypergrad(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    y: &[f64],
    batch: &BatchHandle,
    mode: HypergradMode,
) -> Result<HypergradEstimate> {
    crate::error::check_task(task, problem.n_tasks())?;
    check_len("x", x, problem.outer_dim())?;
    check_len("y", y, problem.inner_dim(task))?;

    let grad_x = problem.grad_x_f(task, x, y, batch)?;

    match mode {
        HypergradMode::FirstOrder { declared_bias } => Ok(HypergradEstimate {
            grad: grad_x,
            mode,
            solve_residual: 0.0,
            bias_bound: declared_bias,
        }),
        HypergradMode::ExactSolve => {
            let d2 = problem.inner_dim(task);
            if d2 > DENSE_CUTOFF && problem.dense_hess_yy_g(task, x, y, batch).is_none() {
                return Err(MorbitError::UnsupportedProblem(format!(
                    "dense solve needs inner dimension <= {DENSE_CUTOFF} or a dense Hessian oracle (task {task} has {d2})"
                )));
            }
            let grad_y = problem.grad_y_f(task, x, y, batch)?;
            let hess = match problem.dense_hess_yy_g(task, x, y, batch) {
                Some(h) => h,
                None => assemble_dense_hessian(problem, task, x, y, batch, d2)?,
            };
            let z = hess.cholesky()?.solve(&grad_y);
            let correction = problem.hvp_xy_g(task, x, y, &z, batch)?;
            let grad = grad_x
                .iter()
                .zip(&correction)
                .map(|(g, c)| g - c)
                .collect();
            Ok(HypergradEstimate {
                grad,
                mode,
                solve_residual: 0.0,
                bias_bound: 0.0,
            })
        }
        HypergradMode::Cg { tol, max_iter } => {
            let grad_y = problem.grad_y_f(task, x, y, batch)?;
            let (z, residual) = cg_solve(
                |v| problem.hvp_yy_g(task, x, y, v, batch),
                &grad_y,
                tol,
                max_iter,
            )?;
            let correction = problem.hvp_xy_g(task, x, y, &z, batch)?;
            let grad = grad_x
                .iter()
                .zip(&correction)
                .map(|(g, c)| g - c)
                .collect();
            Ok(HypergradEstimate {
                grad,
                mode,
                solve_residual: residual,
                bias_bound: residual,
            })
        }
    }
}

fn assemble_dense_hessian(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    y: &[f64],
    batch: &BatchHandle,
    d2: usize,
) -> Result<DenseMatrix> {
    let mut hess = DenseMatrix::zeros(d2, d2);
    let mut e = vec![0.0; d2];
    for j in 0..d2 {
        e[j] = 1.0;
        let col = problem.hvp_yy_g(task, x, y, &e, batch)?;
        e[j] = 0.0;
        for i in 0..d2 {
            hess.set(i, j, col[i]);
        }
    }
    Ok(hess)
}

/// Weight-averaged implicit gradient sum_i lambda_i grad_bar f_i(x, y_i),
/// one batch per task. The bias bound is the lambda-weighted sum of the
/// per-task bounds; the residual reported is the worst per-task residual.
pub fn weighted_hypergrad(
    problem: &dyn ProblemOracles,
    x: &[f64],
    ys: &[Vec<f64>],
    lambda: &[f64],
    batches: &[BatchHandle],
    mode: HypergradMode,
) -> Result<HypergradEstimate> {
    let n = problem.n_tasks();
    if ys.len() != n || lambda.len() != n || batches.len() != n {
        return Err(MorbitError::Shape {
            what: "weighted hypergradient inputs",
            expected: n,
            got: ys.len().min(lambda.len()).min(batches.len()),
        });
    }
    let mut grad = vec![0.0; problem.outer_dim()];
    let mut bias = 0.0;
    let mut residual = 0.0f64;
    for i in 0..n {
        let est = task_hypergrad(problem, i, x, &ys[i], &batches[i], mode)
            .map_err(|e| e.for_task(i))?;
        axpy(&mut grad, lambda[i], &est.grad);
        bias += lambda[i] * est.bias_bound;
        residual = residual.max(est.solve_residual);
    }
    Ok(HypergradEstimate {
        grad,
        mode,
        solve_residual: residual,
        bias_bound: bias,
    })
}

/// Report from a hypergradient finite-difference check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub differenced: Vec<f64>,
}

/// Compares the implicit gradient at y = y_i*(x) against central differences
/// of x -> f_i(x, y_i*(x)), both on full batches. Needs a problem that can
/// produce exact inner optima.
pub fn fd_check(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    eps: f64,
    mode: HypergradMode,
) -> Result<FdReport> {
    if !(1e-8..=1e-2).contains(&eps) {
        return Err(MorbitError::domain(format!(
            "differencing step {eps} outside [1e-8, 1e-2]"
        )));
    }
    let y_star = problem
        .exact_inner_opt(task, x)
        .ok_or_else(|| {
            MorbitError::UnsupportedProblem(
                "finite-difference check needs an exact inner optimum".into(),
            )
        })?;
    let batch = BatchHandle::full(task);
    let est = task_hypergrad(problem, task, x, &y_star, &batch, mode)?;
    let reduced = |xp: &[f64]| -> Result<f64> {
        if let Some(v) = problem.exact_ell(task, xp) {
            return Ok(v);
        }
        let yp = problem.exact_inner_opt(task, xp).ok_or_else(|| {
            MorbitError::UnsupportedProblem("inner optimum unavailable at shifted point".into())
        })?;
        problem.f_value(task, xp, &yp, &BatchHandle::full(task))
    };
    let differenced = central_diff_grad(reduced, x, eps)?;
    Ok(FdReport {
        max_rel_err: max_rel_err(&est.grad, &differenced),
        analytic: est.grad,
        differenced,
    })
}
