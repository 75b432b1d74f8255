//! The `analyze` subcommand: log-log rate fit of a trajectory column
//! against the iteration counter, reported next to the theoretical decay
//! exponent of -2/5.

use std::path::Path;

use morbit_core::diagnostics::{rate_fit, RateFit};

use crate::csvio::{column_series, read_table};
use crate::CliError;

/// Reference exponent: the convergence guarantee decays like K^(-2/5).
pub const REFERENCE_SLOPE: f64 = -0.4;

/// Reads the CSV, extracts `(k, column)` pairs (skipping rows where the
/// cell is empty), and fits the running-minimum envelope in log-log space.
pub fn analyze_csv(csv: &Path, column: &str, k_min: usize) -> Result<RateFit, CliError> {
    let table = read_table(csv)?;
    let series = column_series(&table, csv, column)?;
    rate_fit(&series, k_min).map_err(|e| CliError::Invalid(e.to_string()))
}

pub fn cmd_analyze(csv: &Path, column: &str, k_min: usize) -> Result<(), CliError> {
    let fit = analyze_csv(csv, column, k_min)?;
    println!("rate fit: column `{column}` of {} (k >= {k_min}, {} points)", csv.display(), fit.points);
    println!("  slope     {:+.6}", fit.slope);
    println!("  intercept {:+.6}", fit.intercept);
    println!("  r2        {:.6}", fit.r2);
    println!("  reference slope {REFERENCE_SLOPE} (theoretical decay K^(-2/5))");
    Ok(())
}
