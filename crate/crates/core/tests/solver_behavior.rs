//! Behavior of the solver through the public API alone: feasibility of
//! every recorded iterate, schedule envelopes, reproducibility, constraint
//! handling, and the iterative inner solver on a problem without closed
//! forms.

use proptest::prelude::*;

use morbit_core::constants::RegularityConstants;
use morbit_core::diagnostics::{inner_fit, y_gap, InnerSolveOptions};
use morbit_core::problems::quadratic::{quadratic_oracles, seeded_instance, QuadraticProblem};
use morbit_core::schedule::{schedule_from_constants, StepSchedule};
use morbit_core::solver::{run, ObjectiveMode, ReturnIndexRule, SolverConfig};
use morbit_core::{BatchHandle, BatchSize, ConstraintSet, ProblemOracles};

fn noisy_problem(n: usize, seed: u64) -> QuadraticProblem {
    quadratic_oracles(seeded_instance(n, 4, 4, seed, 0.1, 1.0).unwrap()).unwrap()
}

fn quick_config(k_max: usize, seed: u64) -> SolverConfig {
    let mut cfg = SolverConfig::new(k_max, StepSchedule::manual(0.02, 0.15, 0.05).unwrap(), seed);
    cfg.g_batch = BatchSize::Size(4);
    cfg
}

#[test]
fn weights_stay_on_the_simplex_at_every_record() {
    for seed in [1u64, 2, 3] {
        let problem = noisy_problem(3, 40 + seed);
        let out = run(&problem, &quick_config(150, seed)).unwrap();
        assert_eq!(out.trajectory.len(), 150);
        for rec in &out.trajectory {
            let sum: f64 = rec.lambda.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "weights sum to {sum} at k={}", rec.k);
            assert!(rec.lambda.iter().all(|&l| (0.0..=1.0).contains(&l)));
        }
        let bar_sum: f64 = out.lambda_bar.as_slice().iter().sum();
        assert!((bar_sum - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn same_seed_reproduces_the_run_bitwise() {
    let problem = noisy_problem(3, 9);
    let a = run(&problem, &quick_config(120, 4)).unwrap();
    let b = run(&problem, &quick_config(120, 4)).unwrap();
    assert_eq!(a.tau, b.tau);
    for (ra, rb) in a.trajectory.iter().zip(&b.trajectory) {
        assert_eq!(ra.f_values, rb.f_values);
        assert_eq!(ra.lambda, rb.lambda);
        assert_eq!(ra.grad_norm_x.to_bits(), rb.grad_norm_x.to_bits());
    }
    for (xa, xb) in a.x_bar.iter().zip(&b.x_bar) {
        assert_eq!(xa.to_bits(), xb.to_bits());
    }
}

#[test]
fn return_rules_agree_on_everything_but_the_inner_iterate() {
    let problem = noisy_problem(2, 17);
    let mut shifted = quick_config(80, 6);
    shifted.return_rule = ReturnIndexRule::Shifted;
    let mut aligned = shifted.clone();
    aligned.return_rule = ReturnIndexRule::Aligned;
    let a = run(&problem, &shifted).unwrap();
    let b = run(&problem, &aligned).unwrap();
    // the index draw comes from its own stream, so it cannot differ
    assert_eq!(a.tau, b.tau);
    assert!((1..=80).contains(&a.tau));
    assert_eq!(a.x_bar, b.x_bar);
    assert_eq!(a.lambda_bar, b.lambda_bar);
}

#[test]
fn box_constraint_contains_the_returned_outer_iterate() {
    let problem = noisy_problem(2, 21);
    let mut cfg = quick_config(200, 2);
    cfg.constraint = ConstraintSet::Box { lower: vec![-0.1; 4], upper: vec![0.1; 4] };
    let out = run(&problem, &cfg).unwrap();
    for v in out.x_bar.iter().chain(&out.final_state.x) {
        assert!((-0.1..=0.1).contains(v), "outer iterate escaped the box: {v}");
    }
}

#[test]
fn min_avg_matches_uniform_weights_throughout() {
    let problem = noisy_problem(4, 33);
    let mut cfg = quick_config(60, 8);
    cfg.mode = ObjectiveMode::MinAvg;
    let out = run(&problem, &cfg).unwrap();
    for rec in &out.trajectory {
        assert_eq!(rec.lambda, vec![0.25; 4], "min-avg weights moved at k={}", rec.k);
    }
}

#[test]
fn divergence_error_keeps_the_partial_trajectory() {
    let problem = noisy_problem(2, 5);
    let mut cfg = quick_config(500, 1);
    cfg.schedule = StepSchedule::manual(1e9, 1e9, 0.05).unwrap();
    let err = run(&problem, &cfg).unwrap_err();
    assert!(err.k < 500, "divergence must be caught before the horizon");
    assert!(!err.trajectory.is_empty());
    assert!(err.trajectory.len() < 500);
}

/// Strips the closed forms off a quadratic problem so the iterative
/// fallback path is what gets exercised.
struct NoClosedForms(QuadraticProblem);

impl ProblemOracles for NoClosedForms {
    fn n_tasks(&self) -> usize {
        self.0.n_tasks()
    }
    fn outer_dim(&self) -> usize {
        self.0.outer_dim()
    }
    fn inner_dim(&self, task: usize) -> usize {
        self.0.inner_dim(task)
    }
    fn f_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> morbit_core::Result<f64> {
        self.0.f_value(task, x, y, batch)
    }
    fn grad_x_f(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> morbit_core::Result<Vec<f64>> {
        self.0.grad_x_f(task, x, y, batch)
    }
    fn grad_y_f(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> morbit_core::Result<Vec<f64>> {
        self.0.grad_y_f(task, x, y, batch)
    }
    fn g_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> morbit_core::Result<f64> {
        self.0.g_value(task, x, y, batch)
    }
    fn grad_y_g(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> morbit_core::Result<Vec<f64>> {
        self.0.grad_y_g(task, x, y, batch)
    }
    fn hvp_yy_g(&self, task: usize, x: &[f64], y: &[f64], v: &[f64], batch: &BatchHandle) -> morbit_core::Result<Vec<f64>> {
        self.0.hvp_yy_g(task, x, y, v, batch)
    }
    fn hvp_xy_g(&self, task: usize, x: &[f64], y: &[f64], v: &[f64], batch: &BatchHandle) -> morbit_core::Result<Vec<f64>> {
        self.0.hvp_xy_g(task, x, y, v, batch)
    }
}

#[test]
fn iterative_inner_solver_reaches_the_hidden_closed_form() {
    let reference = noisy_problem(2, 13);
    let hidden = NoClosedForms(noisy_problem(2, 13));
    let opts = InnerSolveOptions { tol: 1e-10, max_iters: 50_000, allow_fallback: true };
    let x = vec![0.3, -0.2, 0.6, -0.5];
    for task in 0..2 {
        let fit = inner_fit(&hidden, task, &x, &opts).unwrap();
        assert!(fit.converged, "task {task}: mapping norm {:.3e}", fit.grad_norm);
        let exact = reference.exact_inner_opt(task, &x).unwrap();
        let err: f64 = fit
            .y
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-8, "task {task}: fallback optimum off by {err:.3e}");
    }
    // the tracking gap at the exact optima is zero up to solver tolerance
    let ys: Vec<Vec<f64>> = (0..2).map(|t| reference.exact_inner_opt(t, &x).unwrap()).collect();
    let gap = y_gap(&hidden, &x, &ys, &opts).unwrap();
    assert!(gap <= 1e-7, "tracking gap at the optimum is {gap:.3e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Each derived rate must sit under every envelope its derivation
    /// takes a minimum over, and all of them must be positive.
    #[test]
    fn derived_schedule_respects_its_envelopes(
        mu_g in 0.2f64..2.0,
        l_g_extra in 0.0f64..3.0,
        sigma_g in 0.0f64..1.0,
        g_y in 0.2f64..3.0,
        l in 0.2f64..3.0,
        b_ell in 0.2f64..3.0,
        n in 1usize..6,
        k_max in 10u64..1_000_000,
    ) {
        let constants = RegularityConstants {
            mu_g,
            l_g: mu_g + l_g_extra,
            sigma_g,
            g_y,
            l,
            b_ell,
            ..RegularityConstants::all_ones()
        };
        let s = schedule_from_constants(&constants, n, k_max).unwrap();
        let nu = s.nu.expect("derived schedules carry their tracking rate");
        let k = k_max as f64;

        prop_assert!(nu > 0.0 && s.alpha > 0.0 && s.beta > 0.0 && s.gamma > 0.0);
        prop_assert!(nu <= mu_g / (constants.l_g * constants.l_g * (1.0 + sigma_g * sigma_g)) + 1e-15);
        prop_assert!(nu <= 2.0 / mu_g + 1e-15);
        prop_assert!(s.alpha <= mu_g * nu / (16.0 * g_y * l) + 1e-15);
        prop_assert!(s.alpha <= k.powf(-0.6) / (4.0 * g_y * l) + 1e-15);
        prop_assert!(s.beta <= nu + 1e-15);
        prop_assert!(s.beta <= 4.0 * k.powf(-0.4) / mu_g + 1e-15);
        let gamma_expected = 2.0 * k.powf(-0.6) / (b_ell * (n as f64).sqrt());
        prop_assert!((s.gamma - gamma_expected).abs() <= 1e-15 * gamma_expected.max(1.0));
    }

    /// Longer horizons can only shrink the horizon-coupled rates.
    #[test]
    fn derived_rates_shrink_with_the_horizon(k in 10u64..100_000) {
        let constants = RegularityConstants::all_ones();
        let a = schedule_from_constants(&constants, 3, k).unwrap();
        let b = schedule_from_constants(&constants, 3, k * 4).unwrap();
        prop_assert!(b.alpha <= a.alpha);
        prop_assert!(b.beta <= a.beta);
        prop_assert!(b.gamma < a.gamma);
        prop_assert_eq!(a.nu, b.nu);
    }
}
