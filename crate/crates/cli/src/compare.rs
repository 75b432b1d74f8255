//! The `compare` subcommand: run the worst-case (min-max) and average
//! (min-avg) objectives on identical seeds and problems, then report the
//! running minimum of the worst-task true loss on the training tasks and
//! a held-out evaluation at the final outer iterate.

use std::path::Path;

use morbit_core::diagnostics::{unseen_task_eval, InnerSolveOptions};
use morbit_core::solver::{self, ObjectiveMode};
use morbit_core::{MorbitError, ProblemOracles};

use crate::config::ExperimentConfig;
use crate::csvio::{fmt_f64, median};
use crate::problem::{build_problem, build_test_problem, solver_config};
use crate::{run_jobs, CliError};

/// One completed arm: the per-iteration running-min worst-task true loss
/// and the held-out worst-task loss at the final outer iterate.
pub struct ArmResult {
    pub seed: u64,
    pub mode: ObjectiveMode,
    pub running_min: Vec<f64>,
    pub unseen_worst: f64,
}

enum ArmOutcome {
    Finished(ArmResult),
    Diverged { seed: u64, mode: ObjectiveMode, what: String, k: usize },
    Failed { seed: u64, message: String },
}

fn mode_name(mode: ObjectiveMode) -> &'static str {
    match mode {
        ObjectiveMode::MinMax => "minmax",
        ObjectiveMode::MinAvg => "minavg",
    }
}

pub fn cmd_compare(
    config_path: &Path,
    output_dir: Option<&Path>,
    workers: Option<usize>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply_overrides(output_dir, workers, seed_override);
    cfg.run.workers = Some(cfg.run.resolved_workers());

    let problem = build_problem(&cfg.problem)?;
    let test_problem = build_test_problem(&cfg.problem)?;
    let n = problem.n_tasks();
    let sched_minmax = cfg
        .schedule
        .build(n, cfg.run.k_max)
        .map_err(|e| CliError::Invalid(format!("schedule: {e}")))?;
    let sched_minavg = cfg
        .schedule
        .build_minavg(n, cfg.run.k_max)
        .map_err(|e| CliError::Invalid(format!("schedule: {e}")))?;

    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config_resolved"), cfg.render_resolved())?;

    let jobs: Vec<(u64, ObjectiveMode)> = cfg
        .run
        .seeds
        .iter()
        .flat_map(|&s| [(s, ObjectiveMode::MinMax), (s, ObjectiveMode::MinAvg)])
        .collect();
    let eval_problem: &dyn ProblemOracles = match &test_problem {
        Some(p) => p.as_ref(),
        None => problem.as_ref(),
    };
    let opts = InnerSolveOptions {
        tol: cfg.run.inner_tol,
        max_iters: cfg.run.inner_iters,
        allow_fallback: true,
    };

    let outcomes = run_jobs(&jobs, cfg.run.resolved_workers(), |&(seed, mode)| {
        let schedule = match mode {
            ObjectiveMode::MinMax => sched_minmax,
            ObjectiveMode::MinAvg => sched_minavg,
        };
        let solver_cfg = solver_config(&cfg, mode, schedule, problem.outer_dim(), seed);
        let mut worst_series: Vec<f64> = Vec::with_capacity(cfg.run.k_max);
        let result = solver::run_observed(problem.as_ref(), &solver_cfg, |state, _rec| {
            let mut worst = f64::NEG_INFINITY;
            for i in 0..n {
                worst = worst.max(problem.true_loss(i, &state.x, &state.ys[i])?);
            }
            worst_series.push(worst);
            Ok(())
        });
        match result {
            Ok(output) => {
                let mut running_min = worst_series;
                let mut best = f64::INFINITY;
                for v in running_min.iter_mut() {
                    best = best.min(*v);
                    *v = best;
                }
                match unseen_task_eval(eval_problem, &output.final_state.x, &opts) {
                    Ok(report) => ArmOutcome::Finished(ArmResult {
                        seed,
                        mode,
                        running_min,
                        unseen_worst: report.max_loss,
                    }),
                    Err(e) => ArmOutcome::Failed { seed, message: format!("held-out evaluation: {e}") },
                }
            }
            Err(run_err) => {
                // keep whatever the arm produced before it died
                let path = dir.join(format!("compare_partial_{}_{}.csv", seed, mode_name(mode)));
                let mut text = String::from("k,worst_true_loss\n");
                for (i, v) in worst_series.iter().enumerate() {
                    text.push_str(&format!("{},{}\n", i + 1, fmt_f64(*v)));
                }
                let _ = std::fs::write(path, text);
                match run_err.error {
                    MorbitError::NumericalDivergence { what, k } => {
                        ArmOutcome::Diverged { seed, mode, what: what.to_string(), k }
                    }
                    other => ArmOutcome::Failed { seed, message: other.to_string() },
                }
            }
        }
    });

    let mut minmax: Vec<ArmResult> = Vec::new();
    let mut minavg: Vec<ArmResult> = Vec::new();
    for outcome in outcomes {
        match outcome {
            ArmOutcome::Finished(arm) => match arm.mode {
                ObjectiveMode::MinMax => minmax.push(arm),
                ObjectiveMode::MinAvg => minavg.push(arm),
            },
            ArmOutcome::Diverged { seed, mode, what, k } => {
                return Err(CliError::Diverged(format!(
                    "{} arm, seed {seed}: {what} at iteration {k}; partial outputs kept in {}",
                    mode_name(mode),
                    dir.display()
                )));
            }
            ArmOutcome::Failed { seed, message } => {
                return Err(CliError::Failure(format!("seed {seed}: {message}")));
            }
        }
    }

    write_seen_csv(&dir.join("compare_seen.csv"), &cfg, &minmax, &minavg)?;
    write_summary_csv(&dir.join("compare_summary.csv"), &minmax, &minavg)?;

    let seen_mm = median(&minmax.iter().map(|a| *a.running_min.last().expect("nonempty run")).collect::<Vec<_>>())
        .expect("at least one seed");
    let seen_ma = median(&minavg.iter().map(|a| *a.running_min.last().expect("nonempty run")).collect::<Vec<_>>())
        .expect("at least one seed");
    let unseen_mm = median(&minmax.iter().map(|a| a.unseen_worst).collect::<Vec<_>>()).expect("at least one seed");
    let unseen_ma = median(&minavg.iter().map(|a| a.unseen_worst).collect::<Vec<_>>()).expect("at least one seed");
    println!("seen tasks:   median final running-min worst-task loss  minmax {} minavg {} -> {}", fmt_f64(seen_mm), fmt_f64(seen_ma), verdict(seen_mm, seen_ma));
    println!("unseen tasks: median worst-task loss at final iterate   minmax {} minavg {} -> {}", fmt_f64(unseen_mm), fmt_f64(unseen_ma), verdict(unseen_mm, unseen_ma));
    println!("wrote compare_seen.csv and compare_summary.csv to {}", dir.display());
    Ok(())
}

fn verdict(minmax: f64, minavg: f64) -> &'static str {
    if minmax < minavg {
        "minmax lower"
    } else if minavg < minmax {
        "minavg lower"
    } else {
        "tied"
    }
}

/// Wide per-iteration table: one running-min column per (method, seed),
/// then the across-seed median per method.
fn write_seen_csv(path: &Path, cfg: &ExperimentConfig, minmax: &[ArmResult], minavg: &[ArmResult]) -> Result<(), CliError> {
    let mut header = vec!["k".to_string()];
    for arm in minmax {
        header.push(format!("minmax_seed_{}", arm.seed));
    }
    for arm in minavg {
        header.push(format!("minavg_seed_{}", arm.seed));
    }
    header.push("minmax_median".into());
    header.push("minavg_median".into());
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..cfg.run.k_max {
        let mm: Vec<f64> = minmax.iter().map(|a| a.running_min[k]).collect();
        let ma: Vec<f64> = minavg.iter().map(|a| a.running_min[k]).collect();
        let mut row = vec![(k + 1).to_string()];
        row.extend(mm.iter().map(|v| fmt_f64(*v)));
        row.extend(ma.iter().map(|v| fmt_f64(*v)));
        row.push(median(&mm).map(fmt_f64).unwrap_or_default());
        row.push(median(&ma).map(fmt_f64).unwrap_or_default());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_summary_csv(path: &Path, minmax: &[ArmResult], minavg: &[ArmResult]) -> Result<(), CliError> {
    let mut out = String::from("seed,minmax_seen_final,minavg_seen_final,minmax_unseen_worst,minavg_unseen_worst\n");
    let mut cols: [Vec<f64>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for (mm, ma) in minmax.iter().zip(minavg) {
        let vals = [
            *mm.running_min.last().expect("nonempty run"),
            *ma.running_min.last().expect("nonempty run"),
            mm.unseen_worst,
            ma.unseen_worst,
        ];
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            mm.seed,
            fmt_f64(vals[0]),
            fmt_f64(vals[1]),
            fmt_f64(vals[2]),
            fmt_f64(vals[3])
        ));
    }
    let meds: Vec<String> = cols.iter().map(|c| median(c).map(fmt_f64).unwrap_or_default()).collect();
    out.push_str(&format!("median,{}\n", meds.join(",")));
    std::fs::write(path, out)?;
    Ok(())
}
