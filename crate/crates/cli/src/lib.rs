//! Command-line front end for the bilevel min-max solver: config parsing,
//! experiment orchestration across seeds, CSV emission, and verification
//! subcommands (gradient checks, method comparison, rate fits).

use std::fmt;

pub mod analyze;
pub mod checkgrad;
pub mod compare;
pub mod config;
pub mod csvio;
pub mod problem;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig};

/// Command failures, each mapped to a process exit code:
/// 2 for invalid configs or inputs, 3 for numerical divergence (partial
/// outputs are preserved), 1 for failed checks and unexpected errors.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, missing column, unusable data: exit 2.
    Invalid(String),
    /// A run diverged; whatever was written stays on disk: exit 3.
    Diverged(String),
    /// Gradient checks exceeded tolerance: exit 1.
    ChecksFailed(String),
    /// Anything else (I/O, library errors outside the above): exit 1.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::ChecksFailed(_) | CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "error: {m}"),
            CliError::Diverged(m) => write!(f, "numerical divergence: {m}"),
            CliError::ChecksFailed(m) => write!(f, "checks failed: {m}"),
            CliError::Failure(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(format!("config {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

/// Runs `work` over the jobs on up to `workers` threads, returning results
/// in job order. Jobs are claimed from a shared counter, so scheduling
/// cannot affect which job runs with which inputs.
pub(crate) fn run_jobs<J, R, F>(jobs: &[J], workers: usize, work: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = workers.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= jobs.len() {
                    break;
                }
                let r = work(&jobs[idx]);
                results.lock().expect("worker poisoned the result store")[idx] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker poisoned the result store")
        .into_iter()
        .map(|r| r.expect("worker skipped a job"))
        .collect()
}
