//! CSV / JSON emission of few-shot reports.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeReport;

pub const CSV_COLUMNS: [&str; 8] = [
    "task",
    "objective",
    "aligned_fraction",
    "n_per_class",
    "trial",
    "accuracy",
    "mean",
    "stderr",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::config("format", format!("unknown format {other:?} (csv, json)"))),
        }
    }
}

/// Picks the format from the file extension, defaulting to CSV.
pub fn format_for(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Format::Json,
        _ => Format::Csv,
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x}")
}

/// CSV text: one row per trial (mean and stderr blank) followed by one
/// summary row per report (trial and accuracy blank).
pub fn results_csv(reports: &[ProbeReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to emit".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        let head = [r.task.clone(), r.objective.clone(), num(r.aligned_fraction), r.n_per_class.to_string()];
        for (t, a) in r.accuracies.iter().enumerate() {
            let mut row = head.to_vec();
            row.extend([t.to_string(), num(*a), String::new(), String::new()]);
            w.write_record(&row)?;
        }
        let mut row = head.to_vec();
        row.extend([String::new(), String::new(), num(r.mean), num(r.stderr)]);
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_results(reports: &[ProbeReport], path: &Path, format: Format) -> Result<()> {
    let text = match format {
        Format::Csv => results_csv(reports)?,
        Format::Json => {
            if reports.is_empty() {
                return Err(Error::Data("no reports to emit".into()));
            }
            serde_json::to_string_pretty(reports)? + "\n"
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse<T: FromStr>(cell: &str, line: usize, col: &str) -> Result<T> {
    cell.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("column {col}: cannot parse {cell:?}"),
    })
}

/// Inverse of [`results_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<ProbeReport>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("unexpected header {headers:?}"),
        });
    }
    let mut out = Vec::new();
    let mut acc = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec[4].is_empty() {
            let mut r = ProbeReport::from_accuracies(
                &rec[0],
                &rec[1],
                parse(&rec[2], line, "aligned_fraction")?,
                parse(&rec[3], line, "n_per_class")?,
                std::mem::take(&mut acc),
            );
            r.mean = parse(&rec[6], line, "mean")?;
            r.stderr = parse(&rec[7], line, "stderr")?;
            out.push(r);
        } else {
            acc.push(parse(&rec[5], line, "accuracy")?);
        }
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<ProbeReport>> {
    let text = std::fs::read_to_string(path)?;
    match format_for(path) {
        Format::Csv => parse_results_csv(&text),
        Format::Json => Ok(serde_json::from_str(&text)?),
    }
}
