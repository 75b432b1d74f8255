//! End-to-end subcommand behavior through the installed binary: exit codes,
//! output files, determinism, and the analysis/check tools.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morbit_cli::csvio::{fmt_f64, median};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_morbit")
}

fn run_cmd(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(bin());
    c.args(args);
    // keep ambient configuration from leaking into determinism checks
    c.env_remove("MORBIT_WORKERS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary should spawn")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

const SMALL_QUADRATIC: &str = "\
[problem]
family = quadratic
n_tasks = 3
outer_dim = 3
inner_dim = 3
seed = 11
noise_sigma = 0.05
[solver]
g_batch = 4
[schedule]
kind = derived
l_g = 2
[run]
seeds = 1, 2, 3, 4
k_max = 60
checkpoint_every = 20
";

#[test]
fn run_writes_trajectories_summary_and_reparseable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let out_dir = tmp.path().join("out");

    let out = run_cmd(
        &["run", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    for seed in [1, 2, 3, 4] {
        let traj = read(&out_dir.join(format!("trajectory_{seed}.csv")));
        let mut lines = traj.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,alpha,beta,gamma,f_0,f_1,f_2,max_f,mean_f,lambda_0,lambda_1,lambda_2,\
             grad_norm_x,y_gap,lambda_gap,prox_gap"
        );
        assert_eq!(lines.count(), 60, "one row per iteration");
    }

    let summary = read(&out_dir.join("summary.csv"));
    assert!(summary.starts_with("seed,k,max_f,mean_f,grad_norm_x,y_gap,lambda_gap,prox_gap\n"));
    assert_eq!(summary.lines().count(), 1 + 4 + 1, "header, four seeds, median");
    assert!(summary.lines().last().unwrap().starts_with("median,60,"));

    // the resolved config is a complete, reparseable reproduction recipe
    let resolved = read(&out_dir.join("config_resolved"));
    let reparsed = morbit_cli::ExperimentConfig::parse(&resolved).expect("resolved config parses");
    assert_eq!(reparsed.run.k_max, 60);
    assert_eq!(reparsed.run.seeds, vec![1, 2, 3, 4]);
}

#[test]
fn unknown_config_field_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[problem]\nfamily = quadratic\nwibble = 3\n");
    let out = run_cmd(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("wibble") && err.contains("line 3"), "stderr: {err}");
}

#[test]
fn divergence_exits_3_and_keeps_partial_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[problem]\nfamily = quadratic\nn_tasks = 2\nouter_dim = 2\ninner_dim = 2\n\
         [schedule]\nkind = manual\nalpha = 1e8\nbeta = 1e8\ngamma = 0.001\n\
         [run]\nseeds = 1\nk_max = 500\n",
    );
    let out_dir = tmp.path().join("boom");
    let out = run_cmd(
        &["run", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let traj = read(&out_dir.join("trajectory_1.csv"));
    assert!(traj.lines().count() >= 2, "partial trajectory should have been written");
    assert!(traj.lines().count() < 501, "the run must have stopped early");
}

#[test]
fn outputs_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let dirs = [tmp.path().join("w1"), tmp.path().join("w4"), tmp.path().join("env")];

    for (dir, extra) in [
        (&dirs[0], Some(("--workers", "1"))),
        (&dirs[1], Some(("--workers", "4"))),
        (&dirs[2], None),
    ] {
        let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()];
        if let Some((flag, v)) = extra {
            args.push(flag);
            args.push(v);
        }
        let envs: &[(&str, &str)] = if extra.is_none() { &[("MORBIT_WORKERS", "3")] } else { &[] };
        let out = run_cmd(&args, envs);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }

    for name in ["trajectory_1.csv", "trajectory_2.csv", "trajectory_3.csv", "trajectory_4.csv", "summary.csv"] {
        let a = read(&dirs[0].join(name));
        let b = read(&dirs[1].join(name));
        let c = read(&dirs[2].join(name));
        assert_eq!(a, b, "{name} differs between 1 and 4 workers");
        assert_eq!(a, c, "{name} differs under MORBIT_WORKERS=3");
    }
}

#[test]
fn summary_medians_match_independent_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let out_dir = tmp.path().join("out");
    let out = run_cmd(
        &["run", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success());

    let summary = read(&out_dir.join("summary.csv"));
    let lines: Vec<&str> = summary.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let seed_rows: Vec<Vec<&str>> = lines[1..lines.len() - 1]
        .iter()
        .map(|l| l.split(',').collect())
        .collect();
    let median_row: Vec<&str> = lines[lines.len() - 1].split(',').collect();
    assert_eq!(median_row[0], "median");

    for col in 2..header.len() {
        let values: Vec<f64> = seed_rows
            .iter()
            .filter(|r| !r[col].is_empty())
            .map(|r| r[col].parse().unwrap())
            .collect();
        let expect = median(&values).map(fmt_f64).unwrap_or_default();
        assert_eq!(
            median_row[col], expect,
            "median of column `{}` should match recomputation from the seed rows",
            header[col]
        );
    }
}

#[test]
fn seed_override_replaces_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let out_dir = tmp.path().join("s9");
    let out = run_cmd(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--seed-override",
            "9",
        ],
        &[],
    );
    assert!(out.status.success());
    assert!(out_dir.join("trajectory_9.csv").exists());
    assert!(!out_dir.join("trajectory_1.csv").exists());
    let summary = read(&out_dir.join("summary.csv"));
    assert_eq!(summary.lines().count(), 3, "header, one seed, median");
}

#[test]
fn invalid_workers_env_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    for bad in ["zero", "0"] {
        let out = run_cmd(
            &["run", "--config", cfg.to_str().unwrap()],
            &[("MORBIT_WORKERS", bad)],
        );
        assert_eq!(out.status.code(), Some(2), "MORBIT_WORKERS={bad}");
    }
}

#[test]
fn checkgrad_quadratic_reports_all_oracles_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[problem]\nfamily = quadratic\nn_tasks = 2\nouter_dim = 4\ninner_dim = 4\nseed = 5\n",
    );
    let out = run_cmd(&["checkgrad", "--config", cfg.to_str().unwrap()], &[]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for oracle in ["grad_x_f", "grad_y_f", "grad_y_g", "hvp_yy_g", "hvp_xy_g", "hypergrad_fd"] {
        assert!(text.contains(oracle), "missing {oracle} in:\n{text}");
    }
}

#[test]
fn compare_single_task_arms_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[problem]\nfamily = quadratic\nn_tasks = 1\nouter_dim = 3\ninner_dim = 3\nseed = 2\n\
         [schedule]\nkind = derived\nl_g = 2\n[run]\nseeds = 1, 2\nk_max = 80\n",
    );
    let out_dir = tmp.path().join("cmp1");
    let out = run_cmd(
        &["compare", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let seen = read(&out_dir.join("compare_seen.csv"));
    let mut lines = seen.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let pick = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (a, b) = (pick("minmax_seed_1"), pick("minavg_seed_1"));
    let (ma, mb) = (pick("minmax_median"), pick("minavg_median"));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[a], cells[b], "single-task min-max and min-avg must coincide");
        assert_eq!(cells[ma], cells[mb]);
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tied"), "verdict should be a tie:\n{stdout}");
}

#[test]
fn compare_identical_tasks_is_a_tie() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[problem]\nfamily = quadratic\nn_tasks = 3\nouter_dim = 3\ninner_dim = 3\nseed = 4\n\
         identical = true\n[schedule]\nkind = derived\nl_g = 2\n[run]\nseeds = 1\nk_max = 80\n",
    );
    let out_dir = tmp.path().join("cmp_same");
    let out = run_cmd(
        &["compare", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // identical tasks keep lambda uniform by symmetry, so the weighted and
    // unweighted descent directions coincide exactly
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tied"), "verdict should be a tie:\n{stdout}");
}

#[test]
fn analyze_recovers_a_pure_power_law_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("series.csv");
    let mut text = String::from("k,grad_norm_x\n");
    for k in 1..=400usize {
        text.push_str(&format!("{k},{}\n", 3.0 * (k as f64).powf(-0.4)));
    }
    fs::write(&csv, text).unwrap();

    let out = run_cmd(&["analyze", csv.to_str().unwrap(), "grad_norm_x"], &[]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let slope_line = stdout.lines().find(|l| l.contains("slope")).expect("slope line");
    let slope: f64 = slope_line
        .split_whitespace()
        .find_map(|tok| tok.parse::<f64>().ok())
        .expect("numeric slope");
    assert!((slope + 0.4).abs() < 1e-6, "slope {slope} should be -0.4");
}

#[test]
fn analyze_missing_column_and_empty_csv_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("series.csv");
    fs::write(&csv, "k,value\n1,1.0\n2,0.5\n").unwrap();
    let out = run_cmd(&["analyze", csv.to_str().unwrap(), "missing_col"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_col"));

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = run_cmd(&["analyze", empty.to_str().unwrap(), "value"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_2() {
    let out = run_cmd(&["run", "--config", "/nonexistent/exp.cfg"], &[]);
    assert_eq!(out.status.code(), Some(2));
}
