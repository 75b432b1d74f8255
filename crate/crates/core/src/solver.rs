//! Single-loop solver for the weighted min-max bilevel problem.
//!
//! Each iteration advances three coupled sequences from state
//! (x_{k-1}, y_{k-1}, lambda_{k-1}):
//!
//!   1. every task's inner variable takes `inner_steps_per_outer` descent
//!      steps on its sampled inner gradient (step beta), producing y_k;
//!   2. the outer variable takes one projected descent step along the
//!      lambda-weighted implicit gradient at (x_{k-1}, y_k) (step alpha);
//!   3. the task weights take one projected ascent step on the sampled
//!      outer values f_i(x_{k-1}, y_k^i) (step gamma), optionally pulled
//!      toward uniform by `lambda_reg_eps`.
//!
//! After K iterations the run reports the iterate at an index tau drawn
//! uniformly from {1..K} on a dedicated RNG stream; the inner variables are
//! reported from the iteration before tau by default, which is the pairing
//! the tracking-error analysis uses.

use crate::error::{check_len, MorbitError, Result};
use crate::hypergrad::{weighted_hypergrad, HypergradMode};
use crate::linalg::{all_finite, axpy, norm2};
use crate::oracles::{sample_batch, sample_outer_batch, BatchHandle, BatchSize, ProblemOracles};
use crate::projections::{project_set, project_simplex, SimplexVector};
use crate::schedule::StepSchedule;
use crate::state::{ConstraintSet, IterateState};

pub use crate::problems::trmaml::trmaml_inner;

/// Whether the task weights chase the worst task or stay uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Ascent on the weights: optimizes the worst-case task mixture.
    MinMax,
    /// Weights frozen at uniform: optimizes the average objective.
    MinAvg,
}

/// Which inner iterate is reported at the returned index tau.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnIndexRule {
    /// y from iteration tau-1, pairing y with the x it was tracking.
    Shifted,
    /// y from iteration tau itself.
    Aligned,
}

/// Multiplies all three step sizes by `factor` when the worst-task value
/// fails to strictly improve for `patience` consecutive checks, checked
/// every `window` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub window: usize,
    pub patience: usize,
    pub factor: f64,
}

/// Full description of one solver run.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Total outer iterations K.
    pub k_max: usize,
    pub schedule: StepSchedule,
    pub mode: ObjectiveMode,
    pub hypergrad: HypergradMode,
    /// Inner descent steps per outer iteration (each task reuses one sampled
    /// batch across them).
    pub inner_steps_per_outer: usize,
    /// Pull of the weight ascent toward uniform weights.
    pub lambda_reg_eps: f64,
    /// Scale of the inner-variable norm penalty added to the inner gradient.
    pub weight_reg_eps: f64,
    /// Batch size for inner-gradient oracles.
    pub g_batch: BatchSize,
    /// Batch size for outer-value and outer-gradient oracles.
    pub f_batch: BatchSize,
    pub plateau: Option<PlateauConfig>,
    pub return_rule: ReturnIndexRule,
    pub constraint: ConstraintSet,
    /// Initial outer variable; defaults to the problem's suggestion, or the
    /// constraint set's center when that suggestion is infeasible.
    pub x0: Option<Vec<f64>>,
    /// Initial inner variables; default per problem (usually zeros).
    pub y0: Option<Vec<Vec<f64>>>,
    /// Initial weights; default uniform.
    pub lambda0: Option<Vec<f64>>,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(k_max: usize, schedule: StepSchedule, seed: u64) -> Self {
        Self {
            k_max,
            schedule,
            mode: ObjectiveMode::MinMax,
            hypergrad: HypergradMode::ExactSolve,
            inner_steps_per_outer: 1,
            lambda_reg_eps: 0.0,
            weight_reg_eps: 0.0,
            g_batch: BatchSize::Full,
            f_batch: BatchSize::Full,
            plateau: None,
            return_rule: ReturnIndexRule::Shifted,
            constraint: ConstraintSet::Unconstrained,
            x0: None,
            y0: None,
            lambda0: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(MorbitError::domain("k_max must be at least 1"));
        }
        if self.inner_steps_per_outer == 0 {
            return Err(MorbitError::domain("inner_steps_per_outer must be at least 1"));
        }
        let s = &self.schedule;
        if !(s.alpha > 0.0 && s.alpha.is_finite())
            || !(s.beta > 0.0 && s.beta.is_finite())
            || !(s.gamma >= 0.0 && s.gamma.is_finite())
        {
            return Err(MorbitError::domain(format!(
                "schedule must satisfy alpha > 0, beta > 0, gamma >= 0; got {} {} {}",
                s.alpha, s.beta, s.gamma
            )));
        }
        for (name, v) in [("lambda_reg_eps", self.lambda_reg_eps), ("weight_reg_eps", self.weight_reg_eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MorbitError::domain(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if let Some(p) = &self.plateau {
            if p.window == 0 || p.patience == 0 {
                return Err(MorbitError::domain("plateau window and patience must be at least 1"));
            }
            if !(p.factor > 0.0 && p.factor < 1.0) {
                return Err(MorbitError::domain(format!(
                    "plateau factor must lie in (0, 1), got {}",
                    p.factor
                )));
            }
        }
        for (name, b) in [("g_batch", self.g_batch), ("f_batch", self.f_batch)] {
            if let BatchSize::Size(0) = b {
                return Err(MorbitError::domain(format!("{name} size must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One row of run diagnostics, produced for every iteration.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// Iteration index, 1-based.
    pub k: usize,
    /// Sampled outer values f_i(x_{k-1}, y_k^i), one per task.
    pub f_values: Vec<f64>,
    pub max_f: f64,
    pub mean_f: f64,
    /// Weights after this iteration's update.
    pub lambda: Vec<f64>,
    /// Norm of the weighted implicit gradient before projection.
    pub grad_norm_x: f64,
    /// max_i ||y_k^i - y_i*(x_{k-1})||^2 when inner optima have closed forms.
    pub y_gap: Option<f64>,
    /// Filled by diagnostics at checkpoints, never by the solver itself.
    pub lambda_gap: Option<f64>,
    pub prox_gap: Option<f64>,
    /// Step sizes in effect at this iteration.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// The returned iterate and the full per-iteration history.
#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub x_bar: Vec<f64>,
    pub y_bar: Vec<Vec<f64>>,
    pub lambda_bar: SimplexVector,
    /// The uniformly drawn return index in {1..K}.
    pub tau: usize,
    /// One record per iteration; length K.
    pub trajectory: Vec<TrajectoryRecord>,
    /// State after iteration K, for reporting final metrics.
    pub final_state: IterateState,
}

/// A failed run, carrying everything produced before the failure.
#[derive(Debug)]
pub struct RunError {
    pub error: MorbitError,
    /// Iteration at which the failure occurred (0 = setup).
    pub k: usize,
    pub trajectory: Vec<TrajectoryRecord>,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run failed at iteration {}: {}", self.k, self.error)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Advances the state by one full iteration using the step sizes in
/// `steps` (the caller's schedule, possibly shrunk by plateau checks).
pub fn morbit_step(
    problem: &dyn ProblemOracles,
    mut state: IterateState,
    config: &SolverConfig,
    steps: &StepSchedule,
) -> Result<(IterateState, TrajectoryRecord)> {
    let n = problem.n_tasks();
    let k_next = state.k + 1;
    let x_prev = state.x.clone();
    let lambda_prev = state.lambda.clone();
    let beta = steps.beta;
    let alpha = steps.alpha;
    let gamma = match config.mode {
        ObjectiveMode::MinMax => steps.gamma,
        ObjectiveMode::MinAvg => 0.0,
    };

    // inner descent: one sampled batch per task, reused across sub-steps
    for i in 0..n {
        let handle = match config.g_batch {
            BatchSize::Full => BatchHandle::full(i),
            BatchSize::Size(m) => sample_batch(&mut state, i, m)?,
        };
        for _ in 0..config.inner_steps_per_outer {
            let mut dir = problem
                .grad_y_g(i, &x_prev, &state.ys[i], &handle)
                .map_err(|e| e.for_task(i))?;
            check_len("inner gradient", &dir, state.ys[i].len()).map_err(|e| e.for_task(i))?;
            if config.weight_reg_eps > 0.0 {
                let sub = problem.weight_penalty_subgrad(i, &state.ys[i]);
                axpy(&mut dir, config.weight_reg_eps, &sub);
            }
            axpy(&mut state.ys[i], -beta, &dir);
        }
    }

    // outer values and outer gradients share one batch per task
    let mut f_handles = Vec::with_capacity(n);
    for i in 0..n {
        f_handles.push(match config.f_batch {
            BatchSize::Full => BatchHandle::full(i),
            BatchSize::Size(m) => sample_outer_batch(&mut state, i, m)?,
        });
    }
    for y in &state.ys {
        if !all_finite(y) {
            return Err(MorbitError::NumericalDivergence { what: "inner variables", k: k_next });
        }
    }
    let mut f_values = Vec::with_capacity(n);
    for i in 0..n {
        f_values.push(
            problem
                .f_value(i, &x_prev, &state.ys[i], &f_handles[i])
                .map_err(|e| e.for_task(i))?,
        );
    }
    if !all_finite(&f_values) {
        return Err(MorbitError::NumericalDivergence { what: "outer values", k: k_next });
    }

    let estimate = weighted_hypergrad(
        problem,
        &x_prev,
        &state.ys,
        &lambda_prev,
        &f_handles,
        config.hypergrad,
    )?;
    let grad_norm_x = norm2(&estimate.grad);
    let mut x_next = x_prev.clone();
    axpy(&mut x_next, -alpha, &estimate.grad);
    if !all_finite(&x_next) {
        return Err(MorbitError::NumericalDivergence { what: "outer variable", k: k_next });
    }
    state.x = project_set(&x_next, &config.constraint)?;

    if gamma > 0.0 {
        let uniform = 1.0 / n as f64;
        let mut z = lambda_prev.clone();
        for i in 0..n {
            let ascent = f_values[i] - config.lambda_reg_eps * (lambda_prev[i] - uniform);
            z[i] += gamma * ascent;
        }
        if !all_finite(&z) {
            return Err(MorbitError::NumericalDivergence { what: "weights", k: k_next });
        }
        state.lambda = project_simplex(&z)?;
    }
    state.k = k_next;

    // tracking error against the paired (previous) x, when computable
    let mut y_gap = Some(0.0f64);
    for i in 0..n {
        match problem.exact_inner_opt(i, &x_prev) {
            Some(y_star) => {
                let d = crate::linalg::norm2_sq(&crate::linalg::sub(&state.ys[i], &y_star));
                y_gap = y_gap.map(|g| g.max(d));
            }
            None => {
                y_gap = None;
                break;
            }
        }
    }

    let max_f = f_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_f = f_values.iter().sum::<f64>() / n as f64;
    let record = TrajectoryRecord {
        k: k_next,
        f_values,
        max_f,
        mean_f,
        lambda: state.lambda.clone(),
        grad_norm_x,
        y_gap,
        lambda_gap: None,
        prox_gap: None,
        alpha,
        beta,
        gamma,
    };
    Ok((state, record))
}

/// Runs the solver to completion. See [`run_observed`] for a variant that
/// can inspect and annotate each iteration.
pub fn run(
    problem: &dyn ProblemOracles,
    config: &SolverConfig,
) -> std::result::Result<SolverOutput, RunError> {
    run_observed(problem, config, |_, _| Ok(()))
}

/// Runs the solver, calling `observer(state_after_step, record)` once per
/// iteration before the record is appended. Observers may fill the optional
/// diagnostic fields; an observer error aborts the run like a step error.
pub fn run_observed<F>(
    problem: &dyn ProblemOracles,
    config: &SolverConfig,
    mut observer: F,
) -> std::result::Result<SolverOutput, RunError>
where
    F: FnMut(&IterateState, &mut TrajectoryRecord) -> Result<()>,
{
    let setup = |e: MorbitError| RunError { error: e, k: 0, trajectory: Vec::new() };
    config.validate().map_err(setup)?;
    let n = problem.n_tasks();
    let d1 = problem.outer_dim();
    config.constraint.validate(d1).map_err(setup)?;

    let x0 = match &config.x0 {
        Some(x) => {
            check_len("x0", x, d1).map_err(setup)?;
            x.clone()
        }
        None => {
            let suggested = problem.default_x0();
            if config.constraint.distance(&suggested) <= 1e-12 {
                suggested
            } else {
                config.constraint.default_point(d1)
            }
        }
    };
    let ys0 = match &config.y0 {
        Some(ys) => {
            if ys.len() != n {
                return Err(setup(MorbitError::Shape {
                    what: "y0",
                    expected: n,
                    got: ys.len(),
                }));
            }
            for (i, y) in ys.iter().enumerate() {
                check_len("y0", y, problem.inner_dim(i)).map_err(|e| setup(e.for_task(i)))?;
            }
            ys.clone()
        }
        None => (0..n).map(|i| problem.default_y0(i)).collect(),
    };
    let mut state = IterateState::new(x0, ys0, config.seed).map_err(setup)?;
    if let Some(l0) = &config.lambda0 {
        state = state.with_lambda(l0.clone()).map_err(setup)?;
    }
    state.validate(&config.constraint).map_err(setup)?;

    let tau = state.rng.draw_return_index(config.k_max);
    let mut steps = config.schedule;
    let mut best_metric = f64::INFINITY;
    let mut strikes = 0usize;
    let mut trajectory: Vec<TrajectoryRecord> = Vec::with_capacity(config.k_max);
    let mut x_bar = None;
    let mut y_bar = None;
    let mut lambda_bar = None;

    for k in 1..=config.k_max {
        if k == tau && config.return_rule == ReturnIndexRule::Shifted {
            y_bar = Some(state.ys.clone());
        }
        let (next, mut record) = match morbit_step(problem, state, config, &steps) {
            Ok(v) => v,
            Err(e) => {
                let error = match e {
                    MorbitError::NumericalDivergence { .. } => e,
                    other => other.for_iteration(k),
                };
                return Err(RunError { error, k, trajectory });
            }
        };
        state = next;
        if let Err(e) = observer(&state, &mut record) {
            return Err(RunError { error: e.for_iteration(k), k, trajectory });
        }
        if k == tau {
            x_bar = Some(state.x.clone());
            lambda_bar = Some(state.lambda.clone());
            if config.return_rule == ReturnIndexRule::Aligned {
                y_bar = Some(state.ys.clone());
            }
        }
        if let Some(p) = &config.plateau {
            if k % p.window == 0 {
                if record.max_f < best_metric {
                    best_metric = record.max_f;
                    strikes = 0;
                } else {
                    strikes += 1;
                    if strikes >= p.patience {
                        steps.alpha *= p.factor;
                        steps.beta *= p.factor;
                        steps.gamma *= p.factor;
                        strikes = 0;
                    }
                }
            }
        }
        trajectory.push(record);
    }

    let lambda_bar = SimplexVector::new(lambda_bar.expect("tau <= k_max"))
        .map_err(|e| RunError { error: e, k: config.k_max, trajectory: Vec::new() })?;
    Ok(SolverOutput {
        x_bar: x_bar.expect("tau <= k_max"),
        y_bar: y_bar.expect("tau <= k_max"),
        lambda_bar,
        tau,
        trajectory,
        final_state: state,
    })
}
