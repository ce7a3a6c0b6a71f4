use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::metrics::MetricsReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::invalid("report_format", format!("unknown format `{other}`"))),
        }
    }
}

pub const CSV_HEADER: &str = "task,old,new,all";

pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{},{:.4},{:.4},{:.4}", r.task, r.old_acc, r.new_acc, r.all_acc);
    }
    out
}

pub fn render_markdown(reports: &[MetricsReport]) -> String {
    let mut out = String::from("| task | old | new | all |\n|---:|---:|---:|---:|\n");
    for r in reports {
        let _ = writeln!(out, "| {} | {:.4} | {:.4} | {:.4} |", r.task, r.old_acc, r.new_acc, r.all_acc);
    }
    out
}

pub fn emit_report(reports: &[MetricsReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Markdown => render_markdown(reports),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One parsed CSV row: `(task, old, new, all)`.
pub type ReportRow = (usize, f64, f64, f64);

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::invalid(
                "parse_report",
                format!("expected header `{CSV_HEADER}`, found {other:?}"),
            ))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::invalid("parse_report", format!("row {}: malformed `{line}`", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((f[0].parse().map_err(|_| bad())?, num(f[1])?, num(f[2])?, num(f[3])?))
        })
        .collect()
}
