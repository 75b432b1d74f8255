//! The `checkgrad` subcommand: finite-difference consistency sweeps over
//! every oracle of the configured problem, plus an end-to-end implicit
//! gradient check on families with closed-form inner optima.

use std::path::Path;

use morbit_core::check::{oracle_consistency, CheckConfig};
use morbit_core::hypergrad::{fd_check, HypergradMode};
use morbit_core::{MorbitError, ProblemOracles};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CheckSettings, ExperimentConfig, ProblemConfig};
use crate::problem::build_problem;
use crate::CliError;

/// One table row: an oracle, its worst relative error, and its tolerance.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub oracle: String,
    pub task: usize,
    pub err: f64,
    pub tol: f64,
}

impl TableRow {
    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

/// Settings of the end-to-end implicit-gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdPlan {
    pub eps: f64,
    pub tol: f64,
    pub points: usize,
    pub seed: u64,
}

/// Family-aware defaults, adjusted by any `[checkgrad]` overrides.
/// Rectifier networks get a tiny second-order step (so the differencing
/// window cannot straddle an activation kink) and a smaller first-order
/// step for the same reason; the smooth families keep looser, cheaper
/// settings.
pub fn resolved_check_config(cfg: &ExperimentConfig) -> CheckConfig {
    let mut c = match &cfg.problem {
        ProblemConfig::Quadratic(_) => CheckConfig {
            points: 20,
            eps: 1e-5,
            grad_tol: 1e-6,
            hvp_tol: 1e-6,
            ..CheckConfig::default()
        },
        ProblemConfig::Sinusoid(_) => CheckConfig {
            points: 8,
            eps: 1e-7,
            grad_tol: 1e-4,
            hvp_tol: 1e-4,
            hvp_step: Some(3e-6),
            ..CheckConfig::default()
        },
        ProblemConfig::LinRep(_) => CheckConfig {
            points: 3,
            ..CheckConfig::default()
        },
    };
    let o = &cfg.check;
    apply_overrides(&mut c, o);
    c
}

fn apply_overrides(c: &mut CheckConfig, o: &CheckSettings) {
    if let Some(v) = o.points {
        c.points = v;
    }
    if let Some(v) = o.eps {
        c.eps = v;
    }
    if let Some(v) = o.hvp_step {
        c.hvp_step = Some(v);
    }
    if let Some(v) = o.grad_tol {
        c.grad_tol = v;
    }
    if let Some(v) = o.hvp_tol {
        c.hvp_tol = v;
    }
}

/// Runs the full sweep and, when `fd` is given, the implicit-gradient
/// check at seeded random outer points for every task.
pub fn checkgrad_table(
    problem: &dyn ProblemOracles,
    check: &CheckConfig,
    fd: Option<&FdPlan>,
) -> Result<Vec<TableRow>, MorbitError> {
    let report = oracle_consistency(problem, check)?;
    let mut rows: Vec<TableRow> = report
        .rows
        .into_iter()
        .map(|r| TableRow { oracle: r.oracle.to_string(), task: r.task, err: r.max_rel_err, tol: r.tol })
        .collect();
    if let Some(plan) = fd {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let d1 = problem.outer_dim();
        for task in 0..problem.n_tasks() {
            let mut worst = 0.0f64;
            for _ in 0..plan.points {
                let x: Vec<f64> = (0..d1).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let report = fd_check(problem, task, &x, plan.eps, HypergradMode::ExactSolve)?;
                worst = worst.max(report.max_rel_err);
            }
            rows.push(TableRow { oracle: "hypergrad_fd".into(), task, err: worst, tol: plan.tol });
        }
    }
    Ok(rows)
}

pub fn cmd_checkgrad(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let problem = build_problem(&cfg.problem)?;
    let check = resolved_check_config(&cfg);
    // the end-to-end check needs closed-form inner optima; probe task 0
    let x0 = problem.default_x0();
    let fd = problem.exact_inner_opt(0, &x0).map(|_| FdPlan {
        eps: cfg.check.fd_eps,
        tol: cfg.check.fd_tol,
        points: cfg.check.fd_points,
        seed: 11,
    });
    let rows = checkgrad_table(problem.as_ref(), &check, fd.as_ref())
        .map_err(|e| CliError::Failure(e.to_string()))?;

    println!("{:<18} {:>4}  {:>12}  {:>9}  status", "oracle", "task", "worst rel err", "tol");
    for row in &rows {
        println!(
            "{:<18} {:>4}  {:>13.3e}  {:>9.1e}  {}",
            row.oracle,
            row.task,
            row.err,
            row.tol,
            if row.passed() { "ok" } else { "FAIL" }
        );
    }
    if fd.is_none() {
        println!("(implicit-gradient check skipped: no closed-form inner optimum)");
    }
    let failures: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} task {}: {:.3e} > {:.1e}", r.oracle, r.task, r.err, r.tol))
        .collect();
    if failures.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failures.join("; ")))
    }
}
