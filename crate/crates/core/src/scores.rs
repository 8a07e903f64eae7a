//! Adaptive (APS) non-conformity scores and classifier-output file ingestion.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Simplex tolerance for a [`ClassifierOutput`] built in memory.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Looser tolerance for probability rows read from disk; accepted rows are
/// renormalized.
pub const FILE_SIMPLEX_TOL: f64 = 1e-3;

/// A probability vector over the label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    probs: Vec<f64>,
}

impl ClassifierOutput {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("classifier output has no labels"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("classifier probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("classifier probabilities sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Softmax of `logits / temperature`.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(invalid(format!("temperature {temperature} must be positive")));
        }
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(invalid("logits must be a non-empty vector of finite values"));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_labels(&self) -> usize {
        self.probs.len()
    }
}

/// A calibration or test example reduced to its score and label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub score: f64,
    pub label: usize,
}

/// One agent's calibration data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationShard {
    pub agent: usize,
    pub examples: Vec<ScoredExample>,
}

impl CalibrationShard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }
}

/// Randomized adaptive score `ρ + u · p[label]`, where `ρ` is the mass of
/// labels strictly more probable than `label`.
pub fn aps_score(output: &ClassifierOutput, label: usize, u: f64) -> Result<f64> {
    let probs = output.probs();
    let Some(&p_label) = probs.get(label) else {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    };
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("randomization {u} outside [0, 1]")));
    }
    let rho: f64 = probs.iter().filter(|&&p| p > p_label).sum();
    Ok((rho + u * p_label).clamp(0.0, 1.0))
}

/// Scores every example with one fresh uniform draw each.
pub fn score_shard<R: Rng + ?Sized>(
    outputs: &[ClassifierOutput],
    labels: &[usize],
    rng: &mut R,
) -> Result<Vec<ScoredExample>> {
    if outputs.len() != labels.len() {
        return Err(invalid(format!(
            "{} classifier outputs but {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    outputs
        .iter()
        .zip(labels)
        .map(|(out, &label)| {
            let u: f64 = rng.random();
            Ok(ScoredExample {
                score: aps_score(out, label, u)?,
                label,
            })
        })
        .collect()
}

/// Column layout of a classifier-output CSV, told apart by its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnFormat {
    /// `label,p0,p1,...`
    Probabilities,
    /// `label,l0,l1,...`
    Logits,
}

/// Reads a `label,p0,...,p{K-1}` file.
pub fn ingest_probs_csv(path: impl AsRef<Path>) -> Result<(Vec<ClassifierOutput>, Vec<usize>)> {
    ingest_csv(path, None)
}

/// Reads a probability or logit file. Logit rows are turned into
/// probabilities with `softmax(l / temperature)`; the temperature defaults to 1
/// and is ignored for probability files.
pub fn ingest_csv(path: impl AsRef<Path>, temperature: Option<f64>) -> Result<(Vec<ClassifierOutput>, Vec<usize>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let format = header_format(&headers)
        .ok_or_else(|| Error::parse(path, "header must be `label,p0,p1,...` or `label,l0,l1,...`"))?;
    let n_classes = headers.len() - 1;

    let mut outputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        // header is row 1
        let row = idx + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != n_classes + 1 {
            return Err(Error::parse(
                path,
                format!("row {row}: expected {} columns, found {}", n_classes + 1, record.len()),
            ));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| Error::parse(path, format!("row {row}: label `{}` is not a class index", &record[0])))?;
        if label >= n_classes {
            return Err(Error::parse(path, format!("row {row}: label {label} out of range")));
        }
        let values = record
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, format!("row {row}: non-numeric entry")))?;
        let output = match format {
            ColumnFormat::Probabilities => {
                probs_row(&values).map_err(|msg| Error::parse(path, format!("row {row}: {msg}")))?
            }
            ColumnFormat::Logits => ClassifierOutput::from_logits(&values, temperature.unwrap_or(1.0))
                .map_err(|e| Error::parse(path, format!("row {row}: {e}")))?,
        };
        outputs.push(output);
        labels.push(label);
    }
    Ok((outputs, labels))
}

/// Writes `label,p0,...` rows.
pub fn write_probs_csv(path: impl AsRef<Path>, outputs: &[ClassifierOutput], labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    if outputs.len() != labels.len() {
        return Err(invalid("outputs and labels differ in length"));
    }
    let n_classes = outputs.first().map_or(0, ClassifierOutput::num_labels);
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..n_classes).map(|k| format!("p{k}")))
        .collect();
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (out, label) in outputs.iter().zip(labels) {
        let row: Vec<String> = std::iter::once(label.to_string())
            .chain(out.probs().iter().map(|p| p.to_string()))
            .collect();
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn header_format(headers: &csv::StringRecord) -> Option<ColumnFormat> {
    if headers.len() < 2 || &headers[0] != "label" {
        return None;
    }
    let columns: Vec<&str> = headers.iter().skip(1).collect();
    let matches = |prefix: char| {
        columns
            .iter()
            .enumerate()
            .all(|(k, c)| c.strip_prefix(prefix) == Some(k.to_string().as_str()))
    };
    if matches('p') {
        Some(ColumnFormat::Probabilities)
    } else if matches('l') {
        Some(ColumnFormat::Logits)
    } else {
        None
    }
}

fn probs_row(values: &[f64]) -> std::result::Result<ClassifierOutput, String> {
    if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > FILE_SIMPLEX_TOL {
        return Err(format!("probabilities sum to {total}, not a point of the simplex"));
    }
    ClassifierOutput::new(values.iter().map(|p| p / total).collect()).map_err(|e| e.to_string())
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    if err.is_io_error() {
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        }
    } else {
        Error::parse(path, err.to_string())
    }
}
