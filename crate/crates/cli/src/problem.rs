//! Wiring from parsed configs to problem instances and solver configs.

use morbit_core::problems::linrep::{linrep_suite, LinRepSource};
use morbit_core::problems::quadratic::quadratic_oracles;
use morbit_core::problems::sinusoid::SinusoidConfig;
use morbit_core::problems::{quadratic, sinusoid};
use morbit_core::schedule::StepSchedule;
use morbit_core::solver::{ObjectiveMode, SolverConfig};
use morbit_core::ProblemOracles;

use crate::config::{ExperimentConfig, ProblemConfig, QuadraticConfig, SinusoidSettings, SourceConfig};
use crate::CliError;

/// A built problem; `Send + Sync` so seeds can share it across workers.
pub type SharedProblem = Box<dyn ProblemOracles + Send + Sync>;

pub fn build_problem(cfg: &ProblemConfig) -> Result<SharedProblem, CliError> {
    match cfg {
        ProblemConfig::Quadratic(q) => build_quadratic(q, q.seed),
        ProblemConfig::Sinusoid(s) => build_sinusoid(s, s.n_easy, s.n_hard, s.seed),
        ProblemConfig::LinRep(l) => {
            let source = match &l.source {
                SourceConfig::Synthetic { n_easy, n_hard, seed } => LinRepSource::SyntheticGaussian {
                    n_easy: *n_easy,
                    n_hard: *n_hard,
                    seed: *seed,
                },
                SourceConfig::Idx { images, labels, pairs, seed } => LinRepSource::IdxDataset {
                    images: images.clone(),
                    labels: labels.clone(),
                    pairs: pairs.clone(),
                    seed: *seed,
                },
            };
            let problem = linrep_suite(&l.spec, &source).map_err(|e| CliError::Invalid(e.to_string()))?;
            Ok(Box::new(problem))
        }
    }
}

/// The held-out problem `compare` evaluates generalization on. `None`
/// means the training problem doubles as its own held-out source (its
/// true loss already reads an untouched split).
pub fn build_test_problem(cfg: &ProblemConfig) -> Result<Option<SharedProblem>, CliError> {
    match cfg {
        ProblemConfig::Quadratic(q) => build_quadratic(q, q.test_seed).map(Some),
        ProblemConfig::Sinusoid(s) => {
            build_sinusoid(s, s.test_n_easy, s.test_n_hard, s.test_seed).map(Some)
        }
        ProblemConfig::LinRep(l) => match &l.source {
            SourceConfig::Synthetic { n_easy, n_hard, .. } => {
                let source = LinRepSource::SyntheticGaussian {
                    n_easy: *n_easy,
                    n_hard: *n_hard,
                    seed: l.test_seed,
                };
                let problem = linrep_suite(&l.spec, &source).map_err(|e| CliError::Invalid(e.to_string()))?;
                Ok(Some(Box::new(problem)))
            }
            SourceConfig::Idx { .. } => Ok(None),
        },
    }
}

fn build_quadratic(q: &QuadraticConfig, seed: u64) -> Result<SharedProblem, CliError> {
    let mut spec = quadratic::seeded_instance(q.n_tasks, q.outer_dim, q.inner_dim, seed, q.noise_sigma, q.target_spread)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    if q.identical {
        let first = spec.tasks[0].clone();
        spec.tasks = vec![first; q.n_tasks];
    }
    let problem = quadratic_oracles(spec).map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(Box::new(problem))
}

fn build_sinusoid(s: &SinusoidSettings, n_easy: usize, n_hard: usize, seed: u64) -> Result<SharedProblem, CliError> {
    let cfg = SinusoidConfig {
        n_easy,
        n_hard,
        shots: s.shots,
        seed,
        widths: s.widths.clone(),
        weight_penalty: s.weight_penalty,
        frequency: s.frequency,
        grid_points: s.grid_points,
    };
    let problem: sinusoid::SinusoidProblem = cfg.build().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(Box::new(problem))
}

/// Assembles the per-seed solver configuration; `mode` and `schedule` are
/// passed separately so `compare` can swap them per arm.
pub fn solver_config(
    exp: &ExperimentConfig,
    mode: ObjectiveMode,
    schedule: StepSchedule,
    outer_dim: usize,
    seed: u64,
) -> SolverConfig {
    let s = &exp.solver;
    let mut cfg = SolverConfig::new(exp.run.k_max, schedule, seed);
    cfg.mode = mode;
    cfg.hypergrad = s.hypergrad;
    cfg.inner_steps_per_outer = s.inner_steps_per_outer;
    cfg.lambda_reg_eps = s.lambda_reg_eps;
    cfg.weight_reg_eps = s.weight_reg_eps;
    cfg.g_batch = s.g_batch;
    cfg.f_batch = s.f_batch;
    cfg.plateau = s.plateau;
    cfg.return_rule = s.return_rule;
    cfg.constraint = s.constraint.to_set(outer_dim);
    cfg
}
