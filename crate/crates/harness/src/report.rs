//! Attribute matrix (CSV) and detail file (JSON).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use matchsearch::desk::Attribute;
use matchsearch::SearchResult;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::metrics::{thresholds, Metrics};

pub const MATRIX_FILE: &str = "report.csv";
pub const DETAIL_FILE: &str = "report.json";

/// One operator configuration and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub metrics: Metrics,
}

pub fn matrix_header() -> String {
    let mut h = String::from("configuration,Overall");
    for a in Attribute::ALL {
        h.push(',');
        h.push_str(a.abbrev());
    }
    h
}

/// AUC matrix; columns with no pairs are left blank.
pub fn matrix_csv(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(HarnessError::Runtime("report needs at least one row".into()));
    }
    let mut out = matrix_header();
    out.push('\n');
    for row in rows {
        if row.label.contains([',', '\n', '"']) {
            return Err(HarnessError::Runtime(format!("row label {:?} is not CSV-safe", row.label)));
        }
        let _ = write!(out, "{},{:.4}", row.label, row.metrics.overall.auc);
        for a in Attribute::ALL {
            out.push(',');
            if let Some(s) = row.metrics.attribute(a) {
                let _ = write!(out, "{:.4}", s.auc);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct Detail<'a> {
    thresholds: Vec<f64>,
    rows: &'a [ReportRow],
    search: &'a [SearchResult],
}

pub fn detail_json(rows: &[ReportRow], search: &[SearchResult]) -> Result<String> {
    let d = Detail {
        thresholds: thresholds(),
        rows,
        search,
    };
    Ok(serde_json::to_string_pretty(&d)? + "\n")
}

/// Writes [`MATRIX_FILE`] and [`DETAIL_FILE`] into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow], search: &[SearchResult]) -> Result<(PathBuf, PathBuf)> {
    let csv = matrix_csv(rows)?;
    let json = detail_json(rows, search)?;
    let (cp, jp) = (dir.join(MATRIX_FILE), dir.join(DETAIL_FILE));
    fs::write(&cp, csv)?;
    fs::write(&jp, json)?;
    Ok((cp, jp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, ious: Vec<f64>, attrs: &[&[Attribute]]) -> ReportRow {
        ReportRow {
            label: label.into(),
            metrics: Metrics::from_ious(ious, attrs).unwrap(),
        }
    }

    #[test]
    fn blank_columns_for_absent_attributes() {
        let r = row("film", vec![0.5, 1.0], &[&[], &[Attribute::Blur]]);
        let csv = matrix_csv(&[r]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "configuration,Overall,SV,OCC,BLUR,DIS,BC,LC");
        assert_eq!(lines[1], "film,0.7143,,,0.9524,,,");
    }

    #[test]
    fn refuses_empty_and_unsafe_labels() {
        assert!(matrix_csv(&[]).is_err());
        assert!(matrix_csv(&[row("a,b", vec![0.1], &[&[]])]).is_err());
    }
}
