use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::{DecodePath, EvalStats};
use super::trainer::EpochLoss;
use crate::data::io::write_file;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 6] = ["method", "corruption", "severity", "accuracy", "cosine", "llm_nll"];

/// Version string embedded in reports.
pub fn version_string() -> String {
    format!("langneck {}", env!("CARGO_PKG_VERSION"))
}

/// Hex SHA-256 prefix of a serialised configuration.
pub fn config_hash(serialized: &str) -> String {
    Sha256::digest(serialized.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One accuracy measurement: a method on clean or corrupted validation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `clean` or a corruption kind name.
    pub corruption: String,
    pub severity: u8,
    pub accuracy: f64,
    pub cosine: Option<f64>,
    pub llm_nll: Option<f64>,
    pub mean_distinct_tokens: f64,
    pub duplicate_violations: usize,
}

impl ReportRow {
    pub fn from_stats(method: &str, corruption: &str, severity: u8, s: &EvalStats) -> Self {
        ReportRow {
            method: method.to_owned(),
            corruption: corruption.to_owned(),
            severity,
            accuracy: s.accuracy,
            cosine: s.mean_cosine,
            llm_nll: s.llm_nll,
            mean_distinct_tokens: s.mean_distinct_tokens,
            duplicate_violations: s.duplicate_violations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub warmup_losses: Vec<f64>,
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    /// Clean validation statistics per decoding path.
    pub validation: Vec<EvalStats>,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn path_stats(&self, path: DecodePath) -> Option<&EvalStats> {
        self.validation.iter().find(|s| s.path == path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={} version={}\n", self.config_hash, self.version);
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.method, r.corruption, r.severity, r.accuracy, opt(r.cosine), opt(r.llm_nll))
                .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// A parsed CSV line.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub corruption: String,
    pub severity: u8,
    pub accuracy: f64,
    pub cosine: Option<f64>,
    pub llm_nll: Option<f64>,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Argument("empty CSV".into()))?;
    if header.split(',').collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::Argument(format!("unexpected CSV header {header:?}")));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Argument(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_COLUMNS.len() {
                return Err(Error::Argument(format!("{} columns in {line:?}", f.len())));
            }
            Ok(CsvRow {
                method: f[0].to_owned(),
                corruption: f[1].to_owned(),
                severity: f[2].parse().map_err(|_| Error::Argument(format!("bad severity {:?}", f[2])))?,
                accuracy: num(f[3])?,
                cosine: opt(f[4])?,
                llm_nll: opt(f[5])?,
            })
        })
        .collect()
}

/// Writes `<prefix>.csv` and `<prefix>.json`; returns both paths.
pub fn emit_report(report: &MetricsReport, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = prefix.with_extension("csv");
    let json = prefix.with_extension("json");
    write_file(&csv, report.to_csv().as_bytes())?;
    write_file(&json, report.to_json().as_bytes())?;
    Ok((csv, json))
}
