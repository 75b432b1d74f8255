//! Trajectory CSV emission and parsing.
//!
//! The column order is fixed so downstream tooling can rely on it:
//!
//!   k, alpha, beta, gamma, f_0..f_{n-1}, max_f, mean_f,
//!   lambda_0..lambda_{n-1}, grad_norm_x, y_gap, lambda_gap, prox_gap
//!
//! The last three cells are empty on iterations where the diagnostic was
//! not computed. Values are written with the shortest decimal form that
//! parses back to the same float, so identical runs produce identical
//! bytes.

use std::fmt::Write as _;
use std::path::Path;

use morbit_core::solver::TrajectoryRecord;

use crate::CliError;

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn trajectory_header(n_tasks: usize) -> String {
    let mut cols: Vec<String> = vec!["k".into(), "alpha".into(), "beta".into(), "gamma".into()];
    cols.extend((0..n_tasks).map(|i| format!("f_{i}")));
    cols.push("max_f".into());
    cols.push("mean_f".into());
    cols.extend((0..n_tasks).map(|i| format!("lambda_{i}")));
    cols.push("grad_norm_x".into());
    cols.push("y_gap".into());
    cols.push("lambda_gap".into());
    cols.push("prox_gap".into());
    cols.join(",")
}

pub fn trajectory_line(rec: &TrajectoryRecord) -> String {
    let mut line = String::new();
    let _ = write!(line, "{},{},{},{}", rec.k, fmt_f64(rec.alpha), fmt_f64(rec.beta), fmt_f64(rec.gamma));
    for f in &rec.f_values {
        let _ = write!(line, ",{}", fmt_f64(*f));
    }
    let _ = write!(line, ",{},{}", fmt_f64(rec.max_f), fmt_f64(rec.mean_f));
    for l in &rec.lambda {
        let _ = write!(line, ",{}", fmt_f64(*l));
    }
    let _ = write!(
        line,
        ",{},{},{},{}",
        fmt_f64(rec.grad_norm_x),
        fmt_opt(rec.y_gap),
        fmt_opt(rec.lambda_gap),
        fmt_opt(rec.prox_gap)
    );
    line
}

pub fn write_trajectory(path: &Path, n_tasks: usize, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(&trajectory_header(n_tasks));
    out.push('\n');
    for rec in records {
        out.push_str(&trajectory_line(rec));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// A parsed CSV: a header row and string cells. Rows must all have the
/// header's width; the format has no quoting, so splitting on commas is
/// exact.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) if !h.trim().is_empty() => h.split(',').map(str::to_string).collect(),
        _ => return Err(CliError::Invalid(format!("{} is empty", path.display()))),
    };
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(CliError::Invalid(format!(
                "{} row {} has {} cells, header has {}",
                path.display(),
                idx + 2,
                cells.len(),
                header.len()
            )));
        }
        rows.push(cells);
    }
    Ok(Table { header, rows })
}

/// Extracts `(k, value)` pairs for one column, skipping rows where the
/// cell is empty (diagnostics not computed at that iteration).
pub fn column_series(table: &Table, path: &Path, column: &str) -> Result<Vec<(usize, f64)>, CliError> {
    let k_idx = table
        .column_index("k")
        .ok_or_else(|| CliError::Invalid(format!("{} has no `k` column", path.display())))?;
    let c_idx = table
        .column_index(column)
        .ok_or_else(|| CliError::Invalid(format!("{} has no `{column}` column", path.display())))?;
    let mut series = Vec::new();
    for (idx, row) in table.rows.iter().enumerate() {
        let cell = &row[c_idx];
        if cell.is_empty() {
            continue;
        }
        let k: usize = row[k_idx]
            .parse()
            .map_err(|_| CliError::Invalid(format!("{} row {}: bad k `{}`", path.display(), idx + 2, row[k_idx])))?;
        let v: f64 = cell
            .parse()
            .map_err(|_| CliError::Invalid(format!("{} row {}: bad value `{cell}` in `{column}`", path.display(), idx + 2)))?;
        series.push((k, v));
    }
    if series.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} has no usable rows in column `{column}`",
            path.display()
        )));
    }
    Ok(series)
}

/// Median of the values; even counts average the two middle elements.
/// Empty input has no median.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median of non-finite values"));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}
