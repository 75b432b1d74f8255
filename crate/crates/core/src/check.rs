//! Finite-difference consistency checks for problem oracles.
//!
//! Central differences of the value oracles are the independent reference
//! every analytic gradient is held against, both in tests and in the
//! `checkgrad` command. Errors are reported relative to
//! `max(1, ||reference||_inf)` so tiny gradients do not inflate ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MorbitError, Result};
use crate::oracles::{BatchHandle, ProblemOracles};

/// Central-difference gradient of a scalar function.
pub fn central_diff_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + eps;
        let fp = f(&xp)?;
        xp[j] = orig - eps;
        let fm = f(&xp)?;
        xp[j] = orig;
        g[j] = (fp - fm) / (2.0 * eps);
    }
    Ok(g)
}

/// Worst-coordinate error of `got` against `want`, relative to
/// `max(1, ||want||_inf)`.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want)
        .fold(0.0f64, |m, (g, w)| m.max((g - w).abs() / scale))
}

/// One gradient-check row: which oracle, at which task, how far off.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub oracle: &'static str,
    pub task: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Report of a full oracle-consistency sweep.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed())
    }
}

/// Options for the consistency sweep.
#[derive(Debug, Clone)]
pub struct CheckConfig {
    /// Random evaluation points per task.
    pub points: usize,
    /// Central-difference step.
    pub eps: f64,
    /// Tolerance for first-order oracles against central differences.
    pub grad_tol: f64,
    /// Tolerance for Hessian-vector products against differenced gradients.
    pub hvp_tol: f64,
    /// Step for the second-order differences; defaults to `max(√eps, eps)`.
    /// Families with piecewise-linear activations need a much smaller step
    /// here, small enough that the differencing window does not straddle a
    /// rectifier kink and flip an activation mask.
    pub hvp_step: Option<f64>,
    /// Scale of the random evaluation points.
    pub point_scale: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            points: 20,
            eps: 1e-5,
            grad_tol: 1e-5,
            hvp_tol: 1e-4,
            hvp_step: None,
            point_scale: 0.5,
            seed: 1,
        }
    }
}

/// Sweeps every task of a problem, comparing all first-order oracles against
/// central differences of the value oracles and both Hessian-vector products
/// against differenced gradients, at seeded random full-batch points.
pub fn oracle_consistency(problem: &dyn ProblemOracles, cfg: &CheckConfig) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d1 = problem.outer_dim();
    for task in 0..problem.n_tasks() {
        let d2 = problem.inner_dim(task);
        let batch = BatchHandle::full(task);
        let mut worst_gx = 0.0f64;
        let mut worst_gy = 0.0f64;
        let mut worst_gyg = 0.0f64;
        let mut worst_hyy = 0.0f64;
        let mut worst_hxy = 0.0f64;
        let mut worst_sym = 0.0f64;
        for _ in 0..cfg.points {
            let x: Vec<f64> = (0..d1)
                .map(|_| rng.gen_range(-cfg.point_scale..cfg.point_scale))
                .collect();
            let y: Vec<f64> = (0..d2)
                .map(|_| rng.gen_range(-cfg.point_scale..cfg.point_scale))
                .collect();

            let gx = problem.grad_x_f(task, &x, &y, &batch)?;
            let fd_x =
                central_diff_grad(|xp| problem.f_value(task, xp, &y, &batch), &x, cfg.eps)?;
            worst_gx = worst_gx.max(max_rel_err(&gx, &fd_x));

            let gy = problem.grad_y_f(task, &x, &y, &batch)?;
            let fd_y =
                central_diff_grad(|yp| problem.f_value(task, &x, yp, &batch), &y, cfg.eps)?;
            worst_gy = worst_gy.max(max_rel_err(&gy, &fd_y));

            let gyg = problem.grad_y_g(task, &x, &y, &batch)?;
            let fd_g =
                central_diff_grad(|yp| problem.g_value(task, &x, yp, &batch), &y, cfg.eps)?;
            worst_gyg = worst_gyg.max(max_rel_err(&gyg, &fd_g));

            // random directions for the Hessian-vector products
            let v: Vec<f64> = (0..d2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let step = cfg.hvp_step.unwrap_or_else(|| cfg.eps.sqrt().max(cfg.eps));
            let hv = problem.hvp_yy_g(task, &x, &y, &v, &batch)?;
            let fd_hv = hvp_by_differencing(
                |yp| problem.grad_y_g(task, &x, yp, &batch),
                &y,
                &v,
                step,
            )?;
            worst_hyy = worst_hyy.max(max_rel_err(&hv, &fd_hv));

            // cross product reference: row j of the cross Hessian applied to
            // v is d/dx_j [grad_y_g(x, y) . v], by central differences in x
            let hxv = problem.hvp_xy_g(task, &x, &y, &v, &batch)?;
            let mut fd_cross = vec![0.0; d1];
            let h = step;
            let mut xp = x.clone();
            for j in 0..d1 {
                let orig = xp[j];
                xp[j] = orig + h;
                let gp = problem.grad_y_g(task, &xp, &y, &batch)?;
                xp[j] = orig - h;
                let gm = problem.grad_y_g(task, &xp, &y, &batch)?;
                xp[j] = orig;
                fd_cross[j] = gp
                    .iter()
                    .zip(gm.iter())
                    .zip(&v)
                    .map(|((p, m), vi)| (p - m) / (2.0 * h) * vi)
                    .sum();
            }
            worst_hxy = worst_hxy.max(max_rel_err(&hxv, &fd_cross));

            // inner Hessian symmetry: u . (H v) == v . (H u)
            let u: Vec<f64> = (0..d2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hu = problem.hvp_yy_g(task, &x, &y, &u, &batch)?;
            let lhs = crate::linalg::dot(&u, &hv);
            let rhs = crate::linalg::dot(&v, &hu);
            worst_sym = worst_sym.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
        report.rows.push(CheckRow {
            oracle: "grad_x_f",
            task,
            max_rel_err: worst_gx,
            tol: cfg.grad_tol,
        });
        report.rows.push(CheckRow {
            oracle: "grad_y_f",
            task,
            max_rel_err: worst_gy,
            tol: cfg.grad_tol,
        });
        report.rows.push(CheckRow {
            oracle: "grad_y_g",
            task,
            max_rel_err: worst_gyg,
            tol: cfg.grad_tol,
        });
        report.rows.push(CheckRow {
            oracle: "hvp_yy_g",
            task,
            max_rel_err: worst_hyy,
            tol: cfg.hvp_tol,
        });
        report.rows.push(CheckRow {
            oracle: "hvp_xy_g",
            task,
            max_rel_err: worst_hxy,
            tol: cfg.hvp_tol,
        });
        report.rows.push(CheckRow {
            oracle: "hvp_yy_g symmetry",
            task,
            max_rel_err: worst_sym,
            tol: 1e-10,
        });
    }
    Ok(report)
}

/// Central difference of a vector-valued map along direction v:
/// (F(p + h v) - F(p - h v)) / 2h.
pub fn hvp_by_differencing(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    p: &[f64],
    v: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(MorbitError::domain("differencing step must be positive"));
    }
    let plus: Vec<f64> = p.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = p.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    Ok(gp
        .iter()
        .zip(gm)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}
