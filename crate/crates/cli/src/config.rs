//! Experiment configuration.
//!
//! Configs are flat, sectioned, human-editable key-value files:
//!
//! ```text
//! # full-line comments and blank lines are ignored
//! [problem]
//! family = quadratic
//! n_tasks = 5
//!
//! [run]
//! seeds = 1,2,3
//! k_max = 20000
//! output_dir = out/quadratic
//! ```
//!
//! Sections are `[problem]`, `[solver]`, `[schedule]`, `[run]`, and
//! `[checkgrad]`; only `[problem]` is mandatory. Every key is typed and
//! validated at load time; unknown sections, unknown keys, duplicates, and
//! malformed values are reported with their line number. The grammar and
//! the full key set are documented in the README.

use std::fmt;
use std::path::{Path, PathBuf};

use morbit_core::constants::RegularityConstants;
use morbit_core::hypergrad::HypergradMode;
use morbit_core::oracles::BatchSize;
use morbit_core::problems::linrep::LinRepSpec;
use morbit_core::schedule::{schedule_from_constants, StepSchedule};
use morbit_core::solver::{ObjectiveMode, PlateauConfig, ReturnIndexRule};
use morbit_core::ConstraintSet;

/// A configuration diagnostic, tied to a source line when one applies.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn at(line: usize, message: impl Into<String>) -> Self {
        ConfigError { line: Some(line), message: message.into() }
    }

    pub fn new(message: impl Into<String>) -> Self {
        ConfigError { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// One `key = value` line, kept with its position for diagnostics.
#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

impl Entry {
    fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T> {
        self.value.parse().map_err(|_| {
            ConfigError::at(
                self.line,
                format!("`{}` expects {what}, got `{}`", self.key, self.value),
            )
        })
    }

    fn parse_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError::at(
                self.line,
                format!("`{}` expects true or false, got `{other}`", self.key),
            )),
        }
    }

    fn parse_list<T: std::str::FromStr>(&self, what: &str) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    ConfigError::at(
                        self.line,
                        format!("`{}` expects a comma-separated list of {what}, got `{}`", self.key, self.value),
                    )
                })
            })
            .collect()
    }

    fn parse_batch(&self) -> Result<BatchSize> {
        if self.value == "full" {
            return Ok(BatchSize::Full);
        }
        let n: usize = self.parse("`full` or a positive batch size")?;
        if n == 0 {
            return Err(ConfigError::at(self.line, format!("`{}` batch size must be positive", self.key)));
        }
        Ok(BatchSize::Size(n))
    }
}

/// A parsed section with take-and-check key consumption: keys left over
/// after the schema has taken what it knows are reported as unknown.
#[derive(Debug)]
struct Section {
    name: &'static str,
    entries: Vec<Entry>,
}

impl Section {
    fn empty(name: &'static str) -> Self {
        Section { name, entries: Vec::new() }
    }

    fn take(&mut self, key: &str) -> Option<Entry> {
        let idx = self.entries.iter().position(|e| e.key == key)?;
        Some(self.entries.remove(idx))
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        self.take(key).map_or(Ok(default), |e| e.parse("a number"))
    }

    fn take_opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key).map(|e| e.parse("a number")).transpose()
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.take(key).map_or(Ok(default), |e| e.parse("a nonnegative integer"))
    }

    fn take_opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key).map(|e| e.parse("a nonnegative integer")).transpose()
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        self.take(key).map_or(Ok(default), |e| e.parse("a nonnegative integer"))
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        self.take(key).map_or(Ok(default), |e| e.parse_bool())
    }

    fn require(&mut self, key: &str) -> Result<Entry> {
        self.take(key)
            .ok_or_else(|| ConfigError::new(format!("[{}] is missing required key `{key}`", self.name)))
    }

    fn finish(self) -> Result<()> {
        match self.entries.first() {
            None => Ok(()),
            Some(e) => Err(ConfigError::at(
                e.line,
                format!("unknown key `{}` in [{}]", e.key, self.name),
            )),
        }
    }
}

const SECTION_NAMES: [&str; 5] = ["problem", "solver", "schedule", "run", "checkgrad"];

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    let mut current: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            let known = SECTION_NAMES
                .iter()
                .find(|&&s| s == name)
                .ok_or_else(|| {
                    ConfigError::at(
                        line_no,
                        format!("unknown section [{name}] (expected one of problem, solver, schedule, run, checkgrad)"),
                    )
                })?;
            if sections.iter().any(|s| s.name == *known) {
                return Err(ConfigError::at(line_no, format!("duplicate section [{name}]")));
            }
            sections.push(Section::empty(known));
            current = Some(sections.len() - 1);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line_no, format!("expected `key = value` or a section header, got `{line}`")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::at(line_no, format!("empty key or value in `{line}`")));
        }
        let section = match current {
            Some(i) => &mut sections[i],
            None => return Err(ConfigError::at(line_no, format!("key `{key}` appears before any section header"))),
        };
        if section.entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::at(line_no, format!("duplicate key `{key}` in [{}]", section.name)));
        }
        section.entries.push(Entry { key, value, line: line_no });
    }
    Ok(sections)
}

/// Quadratic bilevel family: seeded random instances with curvature in
/// [1, 2] and unit-norm couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConfig {
    pub n_tasks: usize,
    pub outer_dim: usize,
    pub inner_dim: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub target_spread: f64,
    /// Clone the first drawn task across all slots, making every task the
    /// same problem (the weight ascent then has nothing to chase).
    pub identical: bool,
    /// Construction seed of the held-out instance used by `compare`.
    pub test_seed: u64,
}

/// Sinusoid regression family: a shared embedding network with per-task
/// linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidSettings {
    pub n_easy: usize,
    pub n_hard: usize,
    pub shots: usize,
    pub seed: u64,
    pub weight_penalty: f64,
    pub frequency: f64,
    pub grid_points: usize,
    pub widths: Vec<usize>,
    /// Held-out task counts and seed used by `compare`.
    pub test_n_easy: usize,
    pub test_n_hard: usize,
    pub test_seed: u64,
}

/// Where a linear-representation problem gets its data.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceConfig {
    Synthetic { n_easy: usize, n_hard: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf, pairs: Vec<(u8, u8)>, seed: u64 },
}

/// Linear representation family: shared linear embedding, softmax heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRepSettings {
    pub spec: LinRepSpec,
    pub source: SourceConfig,
    /// Construction seed of the held-out synthetic suite used by `compare`
    /// (file-backed sources fall back to their own held-out split).
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    Quadratic(QuadraticConfig),
    Sinusoid(SinusoidSettings),
    LinRep(LinRepSettings),
}

impl ProblemConfig {
    pub fn family(&self) -> &'static str {
        match self {
            ProblemConfig::Quadratic(_) => "quadratic",
            ProblemConfig::Sinusoid(_) => "sinusoid",
            ProblemConfig::LinRep(_) => "linrep",
        }
    }
}

fn parse_problem(sec: &mut Section) -> Result<ProblemConfig> {
    let family = sec.require("family")?;
    match family.value.as_str() {
        "quadratic" => {
            let seed = sec.take_u64("seed", 0)?;
            Ok(ProblemConfig::Quadratic(QuadraticConfig {
                n_tasks: sec.take_usize("n_tasks", 5)?,
                outer_dim: sec.take_usize("outer_dim", 8)?,
                inner_dim: sec.take_usize("inner_dim", 8)?,
                seed,
                noise_sigma: sec.take_f64("noise_sigma", 0.0)?,
                target_spread: sec.take_f64("target_spread", 1.0)?,
                identical: sec.take_bool("identical", false)?,
                test_seed: sec.take_u64("test_seed", seed.wrapping_add(1))?,
            }))
        }
        "sinusoid" => {
            let n_easy = sec.take_usize("n_easy", 2)?;
            let n_hard = sec.take_usize("n_hard", 1)?;
            let seed = sec.take_u64("seed", 0)?;
            let widths = match sec.take("widths") {
                Some(e) => e.parse_list("positive integers")?,
                None => vec![1, 80, 80, 10],
            };
            Ok(ProblemConfig::Sinusoid(SinusoidSettings {
                n_easy,
                n_hard,
                shots: sec.take_usize("shots", 10)?,
                seed,
                weight_penalty: sec.take_f64("weight_penalty", 0.01)?,
                frequency: sec.take_f64("frequency", 1.0)?,
                grid_points: sec.take_usize("grid_points", 100)?,
                widths,
                test_n_easy: sec.take_usize("test_n_easy", n_easy)?,
                test_n_hard: sec.take_usize("test_n_hard", n_hard)?,
                test_seed: sec.take_u64("test_seed", seed.wrapping_add(1))?,
            }))
        }
        "linrep" => parse_linrep(sec),
        other => Err(ConfigError::at(
            family.line,
            format!("unknown problem family `{other}` (expected quadratic, sinusoid, or linrep)"),
        )),
    }
}

fn parse_linrep(sec: &mut Section) -> Result<ProblemConfig> {
    let mut spec = match sec.take("scale") {
        None => LinRepSpec::desk(),
        Some(e) => match e.value.as_str() {
            "desk" => LinRepSpec::desk(),
            "paper" => LinRepSpec::paper_scale(),
            other => {
                return Err(ConfigError::at(e.line, format!("`scale` expects desk or paper, got `{other}`")))
            }
        },
    };
    if let Some(v) = sec.take_opt_usize("input_dim")? {
        spec.input_dim = v;
    }
    if let Some(v) = sec.take_opt_usize("rep_dim")? {
        spec.rep_dim = v;
    }
    if let Some(v) = sec.take_opt_f64("l2_coeff")? {
        spec.l2_coeff = v;
    }
    if let Some(v) = sec.take_opt_usize("g_batch")? {
        spec.g_batch = v;
    }
    if let Some(v) = sec.take_opt_usize("f_batch")? {
        spec.f_batch = v;
    }
    if let Some(v) = sec.take_opt_usize("train_per_task")? {
        spec.train_per_task = v;
    }
    if let Some(v) = sec.take_opt_usize("val_per_task")? {
        spec.val_per_task = v;
    }
    if let Some(v) = sec.take_opt_usize("test_per_task")? {
        spec.test_per_task = v;
    }
    let seed = sec.take_u64("seed", 0)?;
    let test_seed = sec.take_u64("test_seed", seed.wrapping_add(1))?;
    let source = match sec.take("source") {
        None => SourceConfig::Synthetic {
            n_easy: sec.take_usize("n_easy", 8)?,
            n_hard: sec.take_usize("n_hard", 2)?,
            seed,
        },
        Some(e) => match e.value.as_str() {
            "synthetic" => SourceConfig::Synthetic {
                n_easy: sec.take_usize("n_easy", 8)?,
                n_hard: sec.take_usize("n_hard", 2)?,
                seed,
            },
            "idx" => {
                let images = PathBuf::from(sec.require("images")?.value);
                let labels = PathBuf::from(sec.require("labels")?.value);
                let pairs_entry = sec.require("pairs")?;
                let mut pairs = Vec::new();
                for part in pairs_entry.value.split(',') {
                    let (a, b) = part.trim().split_once(':').ok_or_else(|| {
                        ConfigError::at(
                            pairs_entry.line,
                            format!("`pairs` expects entries like 0:1, got `{part}`"),
                        )
                    })?;
                    let parse = |s: &str| {
                        s.trim().parse::<u8>().map_err(|_| {
                            ConfigError::at(pairs_entry.line, format!("`pairs` expects class labels 0-255, got `{part}`"))
                        })
                    };
                    pairs.push((parse(a)?, parse(b)?));
                }
                if pairs.is_empty() {
                    return Err(ConfigError::at(pairs_entry.line, "`pairs` must list at least one class pair"));
                }
                for (path, key) in [(&images, "images"), (&labels, "labels")] {
                    if !path.exists() {
                        return Err(ConfigError::new(format!(
                            "`{key}` file does not exist: {}",
                            path.display()
                        )));
                    }
                }
                SourceConfig::Idx { images, labels, pairs, seed }
            }
            other => {
                return Err(ConfigError::at(e.line, format!("`source` expects synthetic or idx, got `{other}`")))
            }
        },
    };
    Ok(ProblemConfig::LinRep(LinRepSettings { spec, source, test_seed }))
}

/// Outer-variable constraint, broadcast from scalars once the dimension is
/// known.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    Unconstrained,
    Box { lower: f64, upper: f64 },
    Ball { center: f64, radius: f64 },
}

impl ConstraintKind {
    pub fn to_set(&self, dim: usize) -> ConstraintSet {
        match *self {
            ConstraintKind::Unconstrained => ConstraintSet::Unconstrained,
            ConstraintKind::Box { lower, upper } => ConstraintSet::Box {
                lower: vec![lower; dim],
                upper: vec![upper; dim],
            },
            ConstraintKind::Ball { center, radius } => ConstraintSet::Ball {
                center: vec![center; dim],
                radius,
            },
        }
    }
}

/// Solver knobs; everything here maps one-to-one onto the library's run
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub mode: ObjectiveMode,
    pub hypergrad: HypergradMode,
    pub inner_steps_per_outer: usize,
    pub lambda_reg_eps: f64,
    pub weight_reg_eps: f64,
    pub g_batch: BatchSize,
    pub f_batch: BatchSize,
    pub plateau: Option<PlateauConfig>,
    pub return_rule: ReturnIndexRule,
    pub constraint: ConstraintKind,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            mode: ObjectiveMode::MinMax,
            hypergrad: HypergradMode::ExactSolve,
            inner_steps_per_outer: 1,
            lambda_reg_eps: 0.0,
            weight_reg_eps: 0.0,
            g_batch: BatchSize::Full,
            f_batch: BatchSize::Full,
            plateau: None,
            return_rule: ReturnIndexRule::Shifted,
            constraint: ConstraintKind::Unconstrained,
        }
    }
}

fn parse_solver(sec: &mut Section) -> Result<SolverSettings> {
    let mut s = SolverSettings::default();
    if let Some(e) = sec.take("mode") {
        s.mode = match e.value.as_str() {
            "minmax" => ObjectiveMode::MinMax,
            "minavg" => ObjectiveMode::MinAvg,
            other => return Err(ConfigError::at(e.line, format!("`mode` expects minmax or minavg, got `{other}`"))),
        };
    }
    let cg_tol = sec.take_f64("cg_tol", 1e-10)?;
    let cg_max_iters = sec.take_usize("cg_max_iters", 500)?;
    let first_order_bias = sec.take_f64("first_order_bias", 0.0)?;
    if let Some(e) = sec.take("hypergrad") {
        s.hypergrad = match e.value.as_str() {
            "exact" => HypergradMode::ExactSolve,
            "cg" => HypergradMode::Cg { tol: cg_tol, max_iter: cg_max_iters },
            "first_order" => HypergradMode::FirstOrder { declared_bias: first_order_bias },
            other => {
                return Err(ConfigError::at(
                    e.line,
                    format!("`hypergrad` expects exact, cg, or first_order, got `{other}`"),
                ))
            }
        };
    }
    s.inner_steps_per_outer = sec.take_usize("inner_steps_per_outer", 1)?;
    s.lambda_reg_eps = sec.take_f64("lambda_reg_eps", 0.0)?;
    s.weight_reg_eps = sec.take_f64("weight_reg_eps", 0.0)?;
    if let Some(e) = sec.take("g_batch") {
        s.g_batch = e.parse_batch()?;
    }
    if let Some(e) = sec.take("f_batch") {
        s.f_batch = e.parse_batch()?;
    }
    let window = sec.take_opt_usize("plateau_window")?;
    let patience = sec.take_opt_usize("plateau_patience")?;
    let factor = sec.take_opt_f64("plateau_factor")?;
    s.plateau = match (window, patience, factor) {
        (None, None, None) => None,
        (Some(window), Some(patience), Some(factor)) => Some(PlateauConfig { window, patience, factor }),
        _ => {
            return Err(ConfigError::new(
                "plateau_window, plateau_patience, and plateau_factor must be set together",
            ))
        }
    };
    if let Some(e) = sec.take("return_rule") {
        s.return_rule = match e.value.as_str() {
            "shifted" => ReturnIndexRule::Shifted,
            "aligned" => ReturnIndexRule::Aligned,
            other => {
                return Err(ConfigError::at(e.line, format!("`return_rule` expects shifted or aligned, got `{other}`")))
            }
        };
    }
    let lower = sec.take_opt_f64("box_lower")?;
    let upper = sec.take_opt_f64("box_upper")?;
    let center = sec.take_opt_f64("ball_center")?;
    let radius = sec.take_opt_f64("ball_radius")?;
    if let Some(e) = sec.take("constraint") {
        s.constraint = match e.value.as_str() {
            "unconstrained" => ConstraintKind::Unconstrained,
            "box" => ConstraintKind::Box {
                lower: lower.ok_or_else(|| ConfigError::at(e.line, "box constraint needs `box_lower`"))?,
                upper: upper.ok_or_else(|| ConfigError::at(e.line, "box constraint needs `box_upper`"))?,
            },
            "ball" => ConstraintKind::Ball {
                center: center.unwrap_or(0.0),
                radius: radius.ok_or_else(|| ConfigError::at(e.line, "ball constraint needs `ball_radius`"))?,
            },
            other => {
                return Err(ConfigError::at(
                    e.line,
                    format!("`constraint` expects unconstrained, box, or ball, got `{other}`"),
                ))
            }
        };
    }
    Ok(s)
}

/// How the three step sizes are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// Coupled schedule derived from regularity constants and the horizon.
    Derived(RegularityConstants),
    Manual { alpha: f64, beta: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Inner step used by the min-avg arm of `compare`; defaults to the
    /// same beta as the min-max arm.
    pub minavg_beta: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Derived(RegularityConstants::all_ones()),
            minavg_beta: None,
        }
    }
}

impl ScheduleConfig {
    /// Builds the schedule for `n_tasks` over horizon `k_max`.
    pub fn build(&self, n_tasks: usize, k_max: usize) -> std::result::Result<StepSchedule, morbit_core::MorbitError> {
        match &self.kind {
            ScheduleKind::Derived(c) => schedule_from_constants(c, n_tasks, k_max as u64),
            ScheduleKind::Manual { alpha, beta, gamma } => StepSchedule::manual(*alpha, *beta, *gamma),
        }
    }

    /// Same schedule with beta replaced by `minavg_beta` when configured.
    pub fn build_minavg(
        &self,
        n_tasks: usize,
        k_max: usize,
    ) -> std::result::Result<StepSchedule, morbit_core::MorbitError> {
        let base = self.build(n_tasks, k_max)?;
        match self.minavg_beta {
            None => Ok(base),
            Some(beta) => StepSchedule::manual(base.alpha, beta, base.gamma),
        }
    }
}

fn parse_schedule(sec: &mut Section) -> Result<ScheduleConfig> {
    let minavg_beta = sec.take_opt_f64("minavg_beta")?;
    let kind = match sec.take("kind") {
        None => ScheduleKind::Derived(take_constants(sec)?),
        Some(e) => match e.value.as_str() {
            "derived" => ScheduleKind::Derived(take_constants(sec)?),
            "manual" => ScheduleKind::Manual {
                alpha: sec.require("alpha")?.parse("a number")?,
                beta: sec.require("beta")?.parse("a number")?,
                gamma: sec.require("gamma")?.parse("a number")?,
            },
            other => return Err(ConfigError::at(e.line, format!("`kind` expects derived or manual, got `{other}`"))),
        },
    };
    Ok(ScheduleConfig { kind, minavg_beta })
}

fn take_constants(sec: &mut Section) -> Result<RegularityConstants> {
    let mut c = RegularityConstants::all_ones();
    c.mu_g = sec.take_f64("mu_g", c.mu_g)?;
    c.l_g = sec.take_f64("l_g", c.l_g)?;
    c.sigma_g = sec.take_f64("sigma_g", c.sigma_g)?;
    c.sigma_f = sec.take_f64("sigma_f", c.sigma_f)?;
    c.b0 = sec.take_f64("b0", c.b0)?;
    c.g_y = sec.take_f64("g_y", c.g_y)?;
    c.l = sec.take_f64("l", c.l)?;
    c.l_f = sec.take_f64("l_f", c.l_f)?;
    c.b_ell = sec.take_f64("b_ell", c.b_ell)?;
    Ok(c)
}

/// Run orchestration: seeds, horizon, checkpointing, and output location.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub seeds: Vec<u64>,
    pub k_max: usize,
    /// Period of the checkpoint diagnostics (weight-optimality gap, and
    /// proximal gap when `prox_rho` is set); 0 disables them. The final
    /// iteration is always treated as a checkpoint when enabled.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
    /// Proximal curvature for the prox-gap diagnostic; unset leaves the
    /// column empty.
    pub prox_rho: Option<f64>,
    pub prox_budget: usize,
    /// Tolerance and budget of the iterative inner fits behind the
    /// checkpoint diagnostics and the held-out evaluations.
    pub inner_tol: f64,
    pub inner_iters: usize,
}

impl RunSettings {
    /// Worker count after defaulting: capped by the seed count, at least 1.
    pub fn resolved_workers(&self) -> usize {
        let cap = self.seeds.len().max(1);
        match self.workers {
            Some(w) => w.max(1),
            None => std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1).min(cap),
        }
    }
}

fn parse_run(sec: &mut Section, family: &str) -> Result<RunSettings> {
    let seeds: Vec<u64> = match sec.take("seeds") {
        Some(e) => {
            let v = e.parse_list("seeds")?;
            if v.is_empty() {
                return Err(ConfigError::at(e.line, "`seeds` must list at least one seed"));
            }
            v
        }
        None => vec![1],
    };
    let k_max = sec.take_usize("k_max", 1000)?;
    if k_max == 0 {
        return Err(ConfigError::new("`k_max` must be positive"));
    }
    // Checkpoint diagnostics default on only where the inner problems have
    // closed forms; iterative families pay per checkpoint, so they opt in.
    let default_every = if family == "quadratic" { (k_max / 20).max(1) } else { 0 };
    let checkpoint_every = sec.take_usize("checkpoint_every", default_every)?;
    let output_dir = PathBuf::from(sec.take("output_dir").map_or("morbit_out".to_string(), |e| e.value));
    let workers = match sec.take_opt_usize("workers")? {
        Some(0) => return Err(ConfigError::new("`workers` must be positive")),
        other => other,
    };
    let prox_rho = sec.take_opt_f64("prox_rho")?;
    let prox_budget = sec.take_usize("prox_budget", 200)?;
    let inner_tol = sec.take_f64("inner_tol", 1e-8)?;
    let inner_iters = sec.take_usize("inner_iters", 200_000)?;
    Ok(RunSettings {
        seeds,
        k_max,
        checkpoint_every,
        output_dir,
        workers,
        prox_rho,
        prox_budget,
        inner_tol,
        inner_iters,
    })
}

/// Overrides for the finite-difference check command; unset values fall
/// back to family-aware defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub points: Option<usize>,
    pub eps: Option<f64>,
    pub hvp_step: Option<f64>,
    pub grad_tol: Option<f64>,
    pub hvp_tol: Option<f64>,
    /// Step and tolerance of the end-to-end implicit-gradient check (only
    /// run for families with closed-form inner optima).
    pub fd_eps: f64,
    pub fd_tol: f64,
    pub fd_points: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            points: None,
            eps: None,
            hvp_step: None,
            grad_tol: None,
            hvp_tol: None,
            fd_eps: 1e-6,
            fd_tol: 1e-6,
            fd_points: 3,
        }
    }
}

fn parse_check(sec: &mut Section) -> Result<CheckSettings> {
    let d = CheckSettings::default();
    Ok(CheckSettings {
        points: sec.take_opt_usize("points")?,
        eps: sec.take_opt_f64("eps")?,
        hvp_step: sec.take_opt_f64("hvp_step")?,
        grad_tol: sec.take_opt_f64("grad_tol")?,
        hvp_tol: sec.take_opt_f64("hvp_tol")?,
        fd_eps: sec.take_f64("fd_eps", d.fd_eps)?,
        fd_tol: sec.take_f64("fd_tol", d.fd_tol)?,
        fd_points: sec.take_usize("fd_points", d.fd_points)?,
    })
}

/// A fully resolved experiment: problem, solver knobs, step schedule, run
/// orchestration, and gradient-check overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub solver: SolverSettings,
    pub schedule: ScheduleConfig,
    pub run: RunSettings,
    pub check: CheckSettings,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = split_sections(text)?;
        let mut take = |name: &str| {
            sections
                .iter()
                .position(|s| s.name == name)
                .map(|i| sections.remove(i))
        };
        let mut problem_sec = take("problem").ok_or_else(|| ConfigError::new("missing [problem] section"))?;
        let problem = parse_problem(&mut problem_sec)?;
        problem_sec.finish()?;

        let solver = match take("solver") {
            Some(mut sec) => {
                let s = parse_solver(&mut sec)?;
                sec.finish()?;
                s
            }
            None => SolverSettings::default(),
        };
        let schedule = match take("schedule") {
            Some(mut sec) => {
                let s = parse_schedule(&mut sec)?;
                sec.finish()?;
                s
            }
            None => ScheduleConfig::default(),
        };
        let run = match take("run") {
            Some(mut sec) => {
                let r = parse_run(&mut sec, problem.family())?;
                sec.finish()?;
                r
            }
            None => parse_run(&mut Section::empty("run"), problem.family())?,
        };
        let check = match take("checkgrad") {
            Some(mut sec) => {
                let c = parse_check(&mut sec)?;
                sec.finish()?;
                c
            }
            None => CheckSettings::default(),
        };
        Ok(ExperimentConfig { problem, solver, schedule, run, check })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies command-line overrides; `workers` and `output_dir` replace
    /// their keys, `seed` replaces the whole seed list.
    pub fn apply_overrides(&mut self, output_dir: Option<&Path>, workers: Option<usize>, seed: Option<u64>) {
        if let Some(dir) = output_dir {
            self.run.output_dir = dir.to_path_buf();
        }
        if let Some(w) = workers {
            self.run.workers = Some(w.max(1));
        }
        if let Some(s) = seed {
            self.run.seeds = vec![s];
        }
    }

    /// Echoes the fully resolved config in its own grammar; parsing the
    /// result reproduces this config exactly.
    pub fn render_resolved(&self) -> String {
        let mut out = String::new();
        render_problem(&mut out, &self.problem);
        render_solver(&mut out, &self.solver);
        render_schedule(&mut out, &self.schedule);
        render_run(&mut out, &self.run);
        render_check(&mut out, &self.check);
        out
    }
}

fn push_kv(out: &mut String, key: &str, value: impl fmt::Display) {
    out.push_str(key);
    out.push_str(" = ");
    out.push_str(&value.to_string());
    out.push('\n');
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn render_problem(out: &mut String, p: &ProblemConfig) {
    out.push_str("[problem]\n");
    push_kv(out, "family", p.family());
    match p {
        ProblemConfig::Quadratic(q) => {
            push_kv(out, "n_tasks", q.n_tasks);
            push_kv(out, "outer_dim", q.outer_dim);
            push_kv(out, "inner_dim", q.inner_dim);
            push_kv(out, "seed", q.seed);
            push_kv(out, "noise_sigma", q.noise_sigma);
            push_kv(out, "target_spread", q.target_spread);
            push_kv(out, "identical", q.identical);
            push_kv(out, "test_seed", q.test_seed);
        }
        ProblemConfig::Sinusoid(s) => {
            push_kv(out, "n_easy", s.n_easy);
            push_kv(out, "n_hard", s.n_hard);
            push_kv(out, "shots", s.shots);
            push_kv(out, "seed", s.seed);
            push_kv(out, "weight_penalty", s.weight_penalty);
            push_kv(out, "frequency", s.frequency);
            push_kv(out, "grid_points", s.grid_points);
            push_kv(out, "widths", join(&s.widths));
            push_kv(out, "test_n_easy", s.test_n_easy);
            push_kv(out, "test_n_hard", s.test_n_hard);
            push_kv(out, "test_seed", s.test_seed);
        }
        ProblemConfig::LinRep(l) => {
            push_kv(out, "input_dim", l.spec.input_dim);
            push_kv(out, "rep_dim", l.spec.rep_dim);
            push_kv(out, "l2_coeff", l.spec.l2_coeff);
            push_kv(out, "g_batch", l.spec.g_batch);
            push_kv(out, "f_batch", l.spec.f_batch);
            push_kv(out, "train_per_task", l.spec.train_per_task);
            push_kv(out, "val_per_task", l.spec.val_per_task);
            push_kv(out, "test_per_task", l.spec.test_per_task);
            push_kv(out, "test_seed", l.test_seed);
            match &l.source {
                SourceConfig::Synthetic { n_easy, n_hard, seed } => {
                    push_kv(out, "source", "synthetic");
                    push_kv(out, "n_easy", n_easy);
                    push_kv(out, "n_hard", n_hard);
                    push_kv(out, "seed", seed);
                }
                SourceConfig::Idx { images, labels, pairs, seed } => {
                    push_kv(out, "source", "idx");
                    push_kv(out, "images", images.display());
                    push_kv(out, "labels", labels.display());
                    let pairs: Vec<String> = pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect();
                    push_kv(out, "pairs", pairs.join(","));
                    push_kv(out, "seed", seed);
                }
            }
        }
    }
    out.push('\n');
}

fn render_solver(out: &mut String, s: &SolverSettings) {
    out.push_str("[solver]\n");
    push_kv(out, "mode", match s.mode {
        ObjectiveMode::MinMax => "minmax",
        ObjectiveMode::MinAvg => "minavg",
    });
    match s.hypergrad {
        HypergradMode::ExactSolve => push_kv(out, "hypergrad", "exact"),
        HypergradMode::Cg { tol, max_iter } => {
            push_kv(out, "hypergrad", "cg");
            push_kv(out, "cg_tol", tol);
            push_kv(out, "cg_max_iters", max_iter);
        }
        HypergradMode::FirstOrder { declared_bias } => {
            push_kv(out, "hypergrad", "first_order");
            push_kv(out, "first_order_bias", declared_bias);
        }
    }
    push_kv(out, "inner_steps_per_outer", s.inner_steps_per_outer);
    push_kv(out, "lambda_reg_eps", s.lambda_reg_eps);
    push_kv(out, "weight_reg_eps", s.weight_reg_eps);
    let batch = |b: BatchSize| match b {
        BatchSize::Full => "full".to_string(),
        BatchSize::Size(n) => n.to_string(),
    };
    push_kv(out, "g_batch", batch(s.g_batch));
    push_kv(out, "f_batch", batch(s.f_batch));
    if let Some(p) = s.plateau {
        push_kv(out, "plateau_window", p.window);
        push_kv(out, "plateau_patience", p.patience);
        push_kv(out, "plateau_factor", p.factor);
    }
    push_kv(out, "return_rule", match s.return_rule {
        ReturnIndexRule::Shifted => "shifted",
        ReturnIndexRule::Aligned => "aligned",
    });
    match s.constraint {
        ConstraintKind::Unconstrained => push_kv(out, "constraint", "unconstrained"),
        ConstraintKind::Box { lower, upper } => {
            push_kv(out, "constraint", "box");
            push_kv(out, "box_lower", lower);
            push_kv(out, "box_upper", upper);
        }
        ConstraintKind::Ball { center, radius } => {
            push_kv(out, "constraint", "ball");
            push_kv(out, "ball_center", center);
            push_kv(out, "ball_radius", radius);
        }
    }
    out.push('\n');
}

fn render_schedule(out: &mut String, s: &ScheduleConfig) {
    out.push_str("[schedule]\n");
    match &s.kind {
        ScheduleKind::Derived(c) => {
            push_kv(out, "kind", "derived");
            push_kv(out, "mu_g", c.mu_g);
            push_kv(out, "l_g", c.l_g);
            push_kv(out, "sigma_g", c.sigma_g);
            push_kv(out, "sigma_f", c.sigma_f);
            push_kv(out, "b0", c.b0);
            push_kv(out, "g_y", c.g_y);
            push_kv(out, "l", c.l);
            push_kv(out, "l_f", c.l_f);
            push_kv(out, "b_ell", c.b_ell);
        }
        ScheduleKind::Manual { alpha, beta, gamma } => {
            push_kv(out, "kind", "manual");
            push_kv(out, "alpha", alpha);
            push_kv(out, "beta", beta);
            push_kv(out, "gamma", gamma);
        }
    }
    if let Some(b) = s.minavg_beta {
        push_kv(out, "minavg_beta", b);
    }
    out.push('\n');
}

fn render_run(out: &mut String, r: &RunSettings) {
    out.push_str("[run]\n");
    push_kv(out, "seeds", join(&r.seeds));
    push_kv(out, "k_max", r.k_max);
    push_kv(out, "checkpoint_every", r.checkpoint_every);
    push_kv(out, "output_dir", r.output_dir.display());
    if let Some(w) = r.workers {
        push_kv(out, "workers", w);
    }
    if let Some(rho) = r.prox_rho {
        push_kv(out, "prox_rho", rho);
    }
    push_kv(out, "prox_budget", r.prox_budget);
    push_kv(out, "inner_tol", r.inner_tol);
    push_kv(out, "inner_iters", r.inner_iters);
    out.push('\n');
}

fn render_check(out: &mut String, c: &CheckSettings) {
    out.push_str("[checkgrad]\n");
    if let Some(v) = c.points {
        push_kv(out, "points", v);
    }
    if let Some(v) = c.eps {
        push_kv(out, "eps", v);
    }
    if let Some(v) = c.hvp_step {
        push_kv(out, "hvp_step", v);
    }
    if let Some(v) = c.grad_tol {
        push_kv(out, "grad_tol", v);
    }
    if let Some(v) = c.hvp_tol {
        push_kv(out, "hvp_tol", v);
    }
    push_kv(out, "fd_eps", c.fd_eps);
    push_kv(out, "fd_tol", c.fd_tol);
    push_kv(out, "fd_points", c.fd_points);
}
