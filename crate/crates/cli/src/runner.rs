//! The `run` subcommand: execute the configured experiment across seeds
//! and write per-seed trajectories, a summary, and the resolved config.

use std::path::Path;

use morbit_core::diagnostics::{self, InnerSolveOptions};
use morbit_core::error::Result as CoreResult;
use morbit_core::solver::{self, TrajectoryRecord};
use morbit_core::{IterateState, MorbitError, ProblemOracles};

use crate::config::ExperimentConfig;
use crate::csvio::{self, fmt_f64, median};
use crate::problem::{build_problem, solver_config};
use crate::{run_jobs, CliError};

/// Outcome of one seed: the full trajectory is already on disk; the final
/// record feeds the summary.
enum SeedOutcome {
    Finished(TrajectoryRecord),
    Diverged { what: String, k: usize },
    Failed(String),
}

pub fn cmd_run(
    config_path: &Path,
    output_dir: Option<&Path>,
    workers: Option<usize>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply_overrides(output_dir, workers, seed_override);
    cfg.run.workers = Some(cfg.run.resolved_workers());

    let problem = build_problem(&cfg.problem)?;
    let schedule = cfg
        .schedule
        .build(problem.n_tasks(), cfg.run.k_max)
        .map_err(|e| CliError::Invalid(format!("schedule: {e}")))?;

    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config_resolved"), cfg.render_resolved())?;

    let outcomes = run_seeds(problem.as_ref(), &cfg, schedule);

    let mut finals = Vec::new();
    let mut divergence: Option<String> = None;
    let mut failure: Option<String> = None;
    for (seed, outcome) in cfg.run.seeds.iter().zip(&outcomes) {
        match outcome {
            SeedOutcome::Finished(rec) => {
                println!(
                    "seed {seed}: k={} max_f={} grad_norm_x={}",
                    rec.k,
                    fmt_f64(rec.max_f),
                    fmt_f64(rec.grad_norm_x)
                );
                finals.push((*seed, rec.clone()));
            }
            SeedOutcome::Diverged { what, k } => {
                divergence.get_or_insert(format!("seed {seed}: {what} at iteration {k}"));
            }
            SeedOutcome::Failed(msg) => {
                failure.get_or_insert(format!("seed {seed}: {msg}"));
            }
        }
    }
    if let Some(msg) = divergence {
        return Err(CliError::Diverged(format!(
            "{msg}; partial trajectories kept in {}",
            dir.display()
        )));
    }
    if let Some(msg) = failure {
        return Err(CliError::Failure(msg));
    }

    let summary = render_summary(&finals);
    std::fs::write(dir.join("summary.csv"), summary)?;
    println!("wrote {} trajectories and summary.csv to {}", finals.len(), dir.display());
    Ok(())
}

/// Runs every configured seed (concurrently up to the worker count) and
/// writes `trajectory_<seed>.csv` for each, including partial trajectories
/// of diverged runs.
fn run_seeds(
    problem: &(dyn ProblemOracles + Send + Sync),
    cfg: &ExperimentConfig,
    schedule: morbit_core::schedule::StepSchedule,
) -> Vec<SeedOutcome> {
    let n_tasks = problem.n_tasks();
    let dir = cfg.run.output_dir.clone();
    run_jobs(&cfg.run.seeds, cfg.run.resolved_workers(), |&seed| {
        let solver_cfg = solver_config(cfg, cfg.solver.mode, schedule, problem.outer_dim(), seed);
        let observer = checkpoint_observer(problem, cfg);
        let path = dir.join(format!("trajectory_{seed}.csv"));
        match solver::run_observed(problem, &solver_cfg, observer) {
            Ok(output) => {
                if let Err(e) = csvio::write_trajectory(&path, n_tasks, &output.trajectory) {
                    return SeedOutcome::Failed(e.to_string());
                }
                match output.trajectory.last() {
                    Some(last) => SeedOutcome::Finished(last.clone()),
                    None => SeedOutcome::Failed("empty trajectory".into()),
                }
            }
            Err(run_err) => {
                if let Err(e) = csvio::write_trajectory(&path, n_tasks, &run_err.trajectory) {
                    return SeedOutcome::Failed(e.to_string());
                }
                match run_err.error {
                    MorbitError::NumericalDivergence { what, k } => {
                        SeedOutcome::Diverged { what: what.to_string(), k }
                    }
                    other => SeedOutcome::Failed(other.to_string()),
                }
            }
        }
    })
}

/// Observer that fills the optional diagnostics at checkpoint iterations:
/// the weight-optimality gap always, the proximal gap when a curvature is
/// configured. The solver fills `y_gap` itself where the problem exposes
/// exact inner optima.
pub fn checkpoint_observer<'a>(
    problem: &'a dyn ProblemOracles,
    cfg: &ExperimentConfig,
) -> impl FnMut(&IterateState, &mut TrajectoryRecord) -> CoreResult<()> + 'a {
    let every = cfg.run.checkpoint_every;
    let k_max = cfg.run.k_max;
    let prox = cfg.run.prox_rho.map(|rho| (rho, cfg.run.prox_budget));
    let opts = InnerSolveOptions {
        tol: cfg.run.inner_tol,
        max_iters: cfg.run.inner_iters,
        allow_fallback: true,
    };
    move |state: &IterateState, rec: &mut TrajectoryRecord| {
        if every == 0 || (rec.k % every != 0 && rec.k != k_max) {
            return Ok(());
        }
        rec.lambda_gap = Some(diagnostics::lambda_gap(problem, &state.x, &rec.lambda, &opts)?);
        if let Some((rho, budget)) = prox {
            rec.prox_gap = Some(diagnostics::prox_stationarity(
                problem, &state.x, &rec.lambda, rho, budget, &opts,
            )?);
        }
        Ok(())
    }
}

/// Summary schema: one row of final metrics per seed, then a `median` row
/// aggregating each column over seeds. Optional diagnostics stay empty
/// when no seed computed them.
fn render_summary(finals: &[(u64, TrajectoryRecord)]) -> String {
    let mut out = String::from("seed,k,max_f,mean_f,grad_norm_x,y_gap,lambda_gap,prox_gap\n");
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for (seed, rec) in finals {
        out.push_str(&format!(
            "{seed},{},{},{},{},{},{},{}\n",
            rec.k,
            fmt_f64(rec.max_f),
            fmt_f64(rec.mean_f),
            fmt_f64(rec.grad_norm_x),
            opt(rec.y_gap),
            opt(rec.lambda_gap),
            opt(rec.prox_gap),
        ));
    }
    let col = |pick: &dyn Fn(&TrajectoryRecord) -> Option<f64>| -> String {
        let values: Vec<f64> = finals.iter().filter_map(|(_, r)| pick(r)).collect();
        median(&values).map(fmt_f64).unwrap_or_default()
    };
    let k = finals.first().map(|(_, r)| r.k).unwrap_or(0);
    out.push_str(&format!(
        "median,{k},{},{},{},{},{},{}\n",
        col(&|r| Some(r.max_f)),
        col(&|r| Some(r.mean_f)),
        col(&|r| Some(r.grad_norm_x)),
        col(&|r| r.y_gap),
        col(&|r| r.lambda_gap),
        col(&|r| r.prox_gap),
    ));
    out
}
