//! Coverage reports and their CSV/JSON serialization.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::MethodKind;
use crate::error::{invalid, Error, Result};

use super::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    /// Fraction of test points covered, one entry per replication.
    pub coverage: Vec<f64>,
    /// Average prediction-set size, one entry per replication.
    pub set_size: Vec<f64>,
    /// Query labels excluded for degenerate weights, per replication.
    pub degenerate_labels: Vec<usize>,
    pub mean_coverage: f64,
    pub mean_set_size: f64,
}

impl MethodSummary {
    pub fn new(method: MethodKind, coverage: Vec<f64>, set_size: Vec<f64>, degenerate_labels: Vec<usize>) -> Self {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Self {
            method,
            mean_coverage: mean(&coverage),
            mean_set_size: mean(&set_size),
            coverage,
            set_size,
            degenerate_labels,
        }
    }

    /// Standard error of the mean coverage across replications.
    pub fn coverage_std_error(&self) -> f64 {
        let r = self.coverage.len();
        if r < 2 {
            return 0.0;
        }
        let var = self
            .coverage
            .iter()
            .map(|c| (c - self.mean_coverage).powi(2))
            .sum::<f64>()
            / (r - 1) as f64;
        (var / r as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodSummary>,
}

impl CoverageReport {
    pub fn method(&self, kind: MethodKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,replication,coverage,mean_set_size\n");
        for m in &self.methods {
            for (r, (c, s)) in m.coverage.iter().zip(&m.set_size).enumerate() {
                writeln!(out, "{},{r},{c},{s}", m.method).expect("writing to a String");
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| invalid(format!("serializing report: {e}")))
    }

    /// Plain-text table of per-method means.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>10} {:>10} {:>10}\n",
            "method", "coverage", "std_err", "set_size"
        );
        for m in &self.methods {
            writeln!(
                out,
                "{:<18} {:>10.4} {:>10.4} {:>10.4}",
                m.method.name(),
                m.mean_coverage,
                m.coverage_std_error(),
                m.mean_set_size
            )
            .expect("writing to a String");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()?.to_str()?.parse().ok()
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(invalid(format!(
                "unknown report format `{other}`, expected csv or json"
            ))),
        }
    }
}

pub fn emit_report(report: &CoverageReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json()?,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a JSON report written by [`emit_report`].
pub fn read_json_report(path: impl AsRef<Path>) -> Result<CoverageReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}
