//! Convergence metrics, empirical rate fitting, and task evaluation.
//!
//! Three numbers summarize how close a returned iterate is to a saddle
//! point: the inner tracking gap max_i ||y_i - y_i*(x)||^2, the weight
//! optimality gap max_lambda F(x, lambda) - F(x, lambda_bar) (linear in
//! lambda, so its maximum sits at a vertex), and the squared displacement of
//! the proximal map ||x_hat(x) - x||^2. Everything here evaluates exact
//! quantities where the problem provides closed forms and falls back to a
//! converged gradient-descent inner solve otherwise.

use crate::error::{check_len, MorbitError, Result};
use crate::hypergrad::{task_hypergrad, HypergradMode};
use crate::linalg::{axpy, dot, norm2, norm2_sq, sub};
use crate::oracles::{BatchHandle, ProblemOracles};

pub use crate::solver::TrajectoryRecord;

/// Gradient norm below which the proximal search is considered stationary.
pub const PROX_GRAD_TOL: f64 = 1e-8;

/// Controls the gradient-descent fallback used when a problem has no
/// closed-form inner optimum.
#[derive(Debug, Clone, Copy)]
pub struct InnerSolveOptions {
    /// Target norm of the composite gradient mapping (the plain gradient
    /// norm when the inner objective is smooth).
    pub tol: f64,
    /// Iteration budget per task.
    pub max_iters: usize,
    /// When false, problems without closed forms are rejected instead of
    /// solved iteratively.
    pub allow_fallback: bool,
}

impl Default for InnerSolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 200_000, allow_fallback: true }
    }
}

/// Result of one inner fit, whether or not it reached tolerance.
#[derive(Debug, Clone)]
pub struct InnerFit {
    pub y: Vec<f64>,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Minimizes g_i(x, .) for one task: closed form when the problem has one,
/// otherwise the accelerated proximal-gradient fallback of [`inner_fit`].
pub fn inner_solve(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    opts: &InnerSolveOptions,
) -> Result<Vec<f64>> {
    let fit = inner_fit(problem, task, x, opts)?;
    if fit.converged {
        Ok(fit.y)
    } else {
        Err(MorbitError::InnerSolveBudgetExceeded {
            budget: opts.max_iters,
            grad_norm: fit.grad_norm,
            tol: opts.tol,
        })
    }
}

/// Like [`inner_solve`] but reports budget exhaustion in-band, keeping the
/// best iterate found.
///
/// The iterative path is an accelerated proximal-gradient descent. When the
/// problem declares a block-norm penalty inside its inner objective (see
/// [`ProblemOracles::inner_penalty_coeff`]) the penalty is split out and
/// applied through its exact proximal map; subgradient steps cannot meet a
/// gradient tolerance at a kinked optimum (a soft-thresholded coordinate
/// pinned at zero), whereas the composite gradient mapping vanishes there.
/// For smooth problems the prox is the identity and the mapping norm reduces
/// to the plain gradient norm. Momentum restarts whenever the objective
/// stops decreasing; if it ascends even without momentum, the curvature
/// estimate was low and the step halves.
pub fn inner_fit(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    opts: &InnerSolveOptions,
) -> Result<InnerFit> {
    crate::error::check_task(task, problem.n_tasks())?;
    check_len("x", x, problem.outer_dim())?;
    if let Some(y) = problem.exact_inner_opt(task, x) {
        return Ok(InnerFit { y, grad_norm: 0.0, iters: 0, converged: true });
    }
    if !opts.allow_fallback {
        return Err(MorbitError::UnsupportedProblem(format!(
            "task {task} has no closed-form inner optimum and the iterative fallback is disabled"
        )));
    }
    let full = BatchHandle::full(task);
    let eps = problem.inner_penalty_coeff(task);
    let mut y = problem.default_y0(task);
    let mut step = 1.0 / (1.1 * curvature_estimate(problem, task, x, &y, &full)?).max(1e-12);
    let mut z = y.clone();
    let mut theta = 1.0f64;
    let mut best_obj = problem.g_value(task, x, &y, &full)?;
    let mut mapping_norm = f64::INFINITY;
    for it in 0..opts.max_iters {
        let mut grad = problem.grad_y_g(task, x, &z, &full)?;
        if eps > 0.0 {
            let sub = problem.weight_penalty_subgrad(task, &z);
            axpy(&mut grad, -eps, &sub);
        }
        let mut y_next: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| zi - step * gi).collect();
        if eps > 0.0 {
            problem.inner_penalty_prox(task, &mut y_next, step * eps);
        }
        mapping_norm = norm2(&sub(&y_next, &z)) / step;
        if mapping_norm <= opts.tol {
            return Ok(InnerFit { y: y_next, grad_norm: mapping_norm, iters: it + 1, converged: true });
        }
        let obj = problem.g_value(task, x, &y_next, &full)?;
        if obj <= best_obj + 1e-12 * (1.0 + best_obj.abs()) {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let momentum = (theta - 1.0) / theta_next;
            z = y_next
                .iter()
                .zip(&y)
                .map(|(n, o)| n + momentum * (n - o))
                .collect();
            y = y_next;
            theta = theta_next;
            best_obj = best_obj.min(obj);
        } else if theta > 1.0 {
            // momentum overshot: restart from the best iterate
            theta = 1.0;
            z = y.clone();
        } else {
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
            z = y.clone();
        }
    }
    Ok(InnerFit { y, grad_norm: mapping_norm, iters: opts.max_iters, converged: mapping_norm <= opts.tol })
}

/// Largest inner-Hessian eigenvalue at (x, y), by power iteration.
fn curvature_estimate(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    y: &[f64],
    batch: &BatchHandle,
) -> Result<f64> {
    let d = problem.inner_dim(task);
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64) * 0.01).collect();
    let scale = norm2(&v);
    for vi in v.iter_mut() {
        *vi /= scale;
    }
    let mut lam = 1.0f64;
    for _ in 0..30 {
        let w = problem.hvp_yy_g(task, x, y, &v, batch)?;
        lam = norm2(&w);
        if !(lam > 0.0 && lam.is_finite()) {
            return Ok(1.0);
        }
        v = w.iter().map(|x| x / lam).collect();
    }
    Ok(lam)
}

/// Per-task reduced objective l_i(x) = f_i(x, y_i*(x)) on the full batch.
pub fn ell_value(
    problem: &dyn ProblemOracles,
    task: usize,
    x: &[f64],
    opts: &InnerSolveOptions,
) -> Result<f64> {
    if let Some(v) = problem.exact_ell(task, x) {
        return Ok(v);
    }
    let y = inner_solve(problem, task, x, opts)?;
    problem.f_value(task, x, &y, &BatchHandle::full(task))
}

/// max_i ||y_i - y_i*(x)||^2 for the supplied pairing of x and inner
/// variables (callers choose whether y is paired with the x it tracked or
/// the current one).
pub fn y_gap(
    problem: &dyn ProblemOracles,
    x: &[f64],
    ys: &[Vec<f64>],
    opts: &InnerSolveOptions,
) -> Result<f64> {
    let n = problem.n_tasks();
    if ys.len() != n {
        return Err(MorbitError::Shape { what: "inner variables", expected: n, got: ys.len() });
    }
    let mut worst = 0.0f64;
    for (i, y) in ys.iter().enumerate() {
        let y_star = inner_solve(problem, i, x, opts).map_err(|e| e.for_task(i))?;
        check_len("y", y, y_star.len()).map_err(|e| e.for_task(i))?;
        worst = worst.max(norm2_sq(&sub(y, &y_star)));
    }
    Ok(worst)
}

/// Weight-optimality gap max_i l_i(x) - sum_i lambda_i l_i(x). The maximum
/// over the simplex of a linear form sits at a vertex, so this is exact.
/// Clamped at zero to absorb roundoff when all tasks tie.
pub fn lambda_gap(
    problem: &dyn ProblemOracles,
    x: &[f64],
    lambda: &[f64],
    opts: &InnerSolveOptions,
) -> Result<f64> {
    let n = problem.n_tasks();
    check_len("lambda", lambda, n)?;
    let mut ells = Vec::with_capacity(n);
    for i in 0..n {
        ells.push(ell_value(problem, i, x, opts).map_err(|e| e.for_task(i))?);
    }
    let best = ells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((best - dot(&ells, lambda)).max(0.0))
}

/// Squared displacement of the proximal map:
/// ||argmin_z (rho/2)||z - x||^2 + sum_i lambda_i l_i(z)  -  x||^2,
/// found by backtracking gradient descent with exact implicit gradients.
/// `budget` caps the descent iterations; exhaustion reports the last gap.
pub fn prox_stationarity(
    problem: &dyn ProblemOracles,
    x: &[f64],
    lambda: &[f64],
    rho: f64,
    budget: usize,
    opts: &InnerSolveOptions,
) -> Result<f64> {
    let n = problem.n_tasks();
    check_len("lambda", lambda, n)?;
    check_len("x", x, problem.outer_dim())?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(MorbitError::domain(format!(
            "prox curvature rho must be positive and finite, got {rho}"
        )));
    }

    let gradient = |z: &[f64]| -> Result<Vec<f64>> {
        let mut g: Vec<f64> = z.iter().zip(x).map(|(zi, xi)| rho * (zi - xi)).collect();
        for i in 0..n {
            if lambda[i] == 0.0 {
                continue;
            }
            let y_star = inner_solve(problem, i, z, opts).map_err(|e| e.for_task(i))?;
            let est = task_hypergrad(
                problem,
                i,
                z,
                &y_star,
                &BatchHandle::full(i),
                HypergradMode::ExactSolve,
            )
            .map_err(|e| e.for_task(i))?;
            axpy(&mut g, lambda[i], &est.grad);
        }
        Ok(g)
    };

    // same gradient-norm-guarded fixed-step scheme as the inner fallback:
    // 1/rho is the right scale once rho dominates, and the guard halves the
    // step until the composite smoothness is respected
    let mut z = x.to_vec();
    let mut step = 1.0 / rho;
    let mut prev_norm = f64::INFINITY;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..budget {
        let grad = gradient(&z)?;
        grad_norm = norm2(&grad);
        if grad_norm <= PROX_GRAD_TOL {
            return Ok(norm2_sq(&sub(&z, x)));
        }
        if grad_norm > 1.05 * prev_norm {
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
        prev_norm = grad_norm;
        axpy(&mut z, -step, &grad);
    }
    if grad_norm <= PROX_GRAD_TOL {
        return Ok(norm2_sq(&sub(&z, x)));
    }
    Err(MorbitError::ProxBudgetExceeded {
        budget,
        last_gap: norm2_sq(&sub(&z, x)),
        grad_norm,
    })
}

/// Log-log least-squares fit of a decaying series.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    /// Fitted exponent: value ~ k^slope.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Points actually used after filtering and running-minimum reduction.
    pub points: usize,
}

/// Fits log(running-min value) against log(k) for k >= k_min. The running
/// minimum suppresses sampling noise so the fit tracks the envelope the
/// convergence guarantee bounds. Needs >= 10 usable points, all positive.
pub fn rate_fit(series: &[(usize, f64)], k_min: usize) -> Result<RateFit> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut run_min = f64::INFINITY;
    for &(k, v) in series {
        if k < k_min.max(1) {
            continue;
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(MorbitError::domain(format!(
                "rate fit needs positive finite values, got {v} at k={k}"
            )));
        }
        run_min = run_min.min(v);
        pts.push(((k as f64).ln(), run_min.ln()));
    }
    if pts.len() < 10 {
        return Err(MorbitError::domain(format!(
            "rate fit needs at least 10 points with k >= {k_min}, got {}",
            pts.len()
        )));
    }
    // a constant envelope is fit exactly by its own level
    if pts.iter().all(|p| p.1 == pts[0].1) {
        return Ok(RateFit { slope: 0.0, intercept: pts[0].1, r2: 1.0, points: pts.len() });
    }
    let m = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    // a constant series is fit exactly by its own mean
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit { slope, intercept, r2, points: pts.len() })
}

/// Means of consecutive same-length windows; the tail shorter than
/// `window` is dropped. Used for trend checks on noisy gap series.
pub fn windowed_means(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    series
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Evaluation of held-out tasks at a frozen outer variable.
#[derive(Debug, Clone)]
pub struct UnseenTaskReport {
    /// True loss per task after fitting a fresh inner variable.
    pub losses: Vec<f64>,
    pub max_loss: f64,
    /// Whether each task's inner fit reached tolerance within budget.
    pub converged: Vec<bool>,
}

/// Fits a fresh inner variable for every task of `problem` (holding x
/// fixed) and reports the true losses. Budget exhaustion flags the task but
/// still reports the loss at the last iterate.
pub fn unseen_task_eval(
    problem: &dyn ProblemOracles,
    x_frozen: &[f64],
    opts: &InnerSolveOptions,
) -> Result<UnseenTaskReport> {
    check_len("x", x_frozen, problem.outer_dim())?;
    let n = problem.n_tasks();
    let mut losses = Vec::with_capacity(n);
    let mut converged = Vec::with_capacity(n);
    for i in 0..n {
        let fit = inner_fit(problem, i, x_frozen, opts).map_err(|e| e.for_task(i))?;
        losses.push(problem.true_loss(i, x_frozen, &fit.y).map_err(|e| e.for_task(i))?);
        converged.push(fit.converged);
    }
    let max_loss = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(UnseenTaskReport { losses, max_loss, converged })
}
