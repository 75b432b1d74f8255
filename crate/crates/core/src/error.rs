use thiserror::Error;

/// Error type shared across the library.
///
/// Numerical failures carry enough context to act on: solver divergence
/// reports the iteration, budget exhaustion reports the last value reached,
/// and per-task failures are annotated with the task index.
#[derive(Debug, Error)]
pub enum MorbitError {
    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("inner objective is not strongly convex: {0}")]
    NotStronglyConvex(String),

    #[error(
        "linear solve did not converge: residual {residual:.3e} above tolerance {tol:.3e} after {iters} iterations"
    )]
    SolveDiverged {
        residual: f64,
        tol: f64,
        iters: usize,
    },

    #[error("non-finite value in {what} at iteration {k}")]
    NumericalDivergence { what: &'static str, k: usize },

    #[error("unsupported problem: {0}")]
    UnsupportedProblem(String),

    #[error(
        "inner solve budget of {budget} iterations exhausted: gradient norm {grad_norm:.3e} above tolerance {tol:.3e}"
    )]
    InnerSolveBudgetExceeded {
        budget: usize,
        grad_norm: f64,
        tol: f64,
    },

    #[error(
        "proximal solve budget of {budget} iterations exhausted: last gap {last_gap:.3e}, gradient norm {grad_norm:.3e}"
    )]
    ProxBudgetExceeded {
        budget: usize,
        last_gap: f64,
        grad_norm: f64,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<MorbitError>,
    },

    #[error("iteration {k}: {source}")]
    Iteration {
        k: usize,
        #[source]
        source: Box<MorbitError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MorbitError {
    pub fn domain(msg: impl Into<String>) -> Self {
        MorbitError::Domain(msg.into())
    }

    pub fn for_task(self, task: usize) -> Self {
        MorbitError::Task {
            task,
            source: Box::new(self),
        }
    }

    pub fn for_iteration(self, k: usize) -> Self {
        MorbitError::Iteration {
            k,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, MorbitError>;

/// Checks that a slice has the expected length.
pub fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(MorbitError::Shape {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Checks that a task index is in range.
pub fn check_task(task: usize, n: usize) -> Result<()> {
    if task >= n {
        return Err(MorbitError::Index {
            what: "task",
            index: task,
            len: n,
        });
    }
    Ok(())
}
