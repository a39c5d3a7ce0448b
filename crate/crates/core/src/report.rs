//! CSV and markdown renderings of an experiment matrix.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (expected csv or markdown)"
            ))),
        }
    }
}

pub const CSV_HEADER: &str = "row_label,seed,accuracy,mean";

fn fixed(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// One line per (row, seed). Failed runs print `NA`.
pub fn render_csv(matrix: &ExperimentMatrix) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &matrix.rows {
        for (seed, acc) in row.seeds.iter().zip(&row.accuracies) {
            let _ = writeln!(out, "{},{},{},{}", row.label, seed, fixed(*acc), fixed(row.mean));
        }
    }
    out
}

/// Accuracy table in percent, one line per row.
pub fn render_markdown(matrix: &ExperimentMatrix) -> String {
    let seeds = matrix.rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
    let mut out = String::from("| Model | Accuracy (mean) |");
    for s in &seeds {
        let _ = write!(out, " seed {s} |");
    }
    out.push_str("\n|---|---:|");
    for _ in &seeds {
        out.push_str("---:|");
    }
    out.push('\n');
    let pct = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{:.2}", 100.0 * v));
    for row in &matrix.rows {
        let _ = write!(out, "| {} | {} |", row.label, pct(row.mean));
        for acc in &row.accuracies {
            let _ = write!(out, " {} |", pct(*acc));
        }
        out.push('\n');
    }
    let errors: Vec<_> = matrix
        .rows
        .iter()
        .flat_map(|r| r.errors.iter().map(move |e| (r.label.as_str(), e)))
        .collect();
    if !errors.is_empty() {
        out.push_str("\nFailed runs:\n\n");
        for (label, e) in errors {
            let _ = writeln!(out, "- {label}: {e}");
        }
    }
    out
}

pub fn render_report(matrix: &ExperimentMatrix, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(matrix),
        ReportFormat::Markdown => render_markdown(matrix),
    }
}

pub fn emit_report(matrix: &ExperimentMatrix, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(matrix, format)).map_err(|e| Error::io(path, e))
}
