//! Experiment configuration files (JSON or TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::MethodKind;
use crate::error::{invalid, Error, Result};
use crate::fedopt::FedConfig;
use crate::labelshift::LabelDistribution;
use crate::privacy::PrivacyBudget;

use super::synthetic::SyntheticSpec;

/// Directory used for reports when neither the config nor the command line
/// names an output file.
pub const OUT_DIR_ENV: &str = "FEDCONFORM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub target_agent: usize,
    #[serde(default = "all_methods")]
    pub methods: Vec<MethodKind>,
    pub alpha: f64,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fed: FedConfig,
    /// When present, the gradient noise is calibrated from `(ε, δ)` and the
    /// label counts get discrete Gaussian noise of scale `count_noise_std`.
    #[serde(default)]
    pub privacy: Option<PrivacyBudget>,
    /// Per-agent training-set sizes for the count-based ratio estimate. When
    /// absent the calibration label counts are used.
    #[serde(default)]
    pub train_sizes: Option<Vec<usize>>,
    /// Draw one calibration subsample for all query labels instead of one per
    /// label.
    #[serde(default)]
    pub shared_subsample: bool,
    /// Report path; `${VAR}` references are expanded from the environment.
    #[serde(default)]
    pub output: Option<String>,
}

fn all_methods() -> Vec<MethodKind> {
    MethodKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    ScoreFile(ScoreFileSource),
}

/// A pool of classifier outputs resampled into agents with prescribed label
/// distributions. Each replication splits the pool in half; agents draw from
/// the calibration half and test points from the other half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFileSource {
    pub path: PathBuf,
    #[serde(default)]
    pub temperature: Option<f64>,
    pub label_dists: Vec<LabelDistribution>,
    pub cal_sizes: Vec<usize>,
    pub test_size: usize,
}

impl DataSource {
    pub fn label_dists(&self) -> &[LabelDistribution] {
        match self {
            DataSource::Synthetic(s) => &s.label_dists,
            DataSource::ScoreFile(s) => &s.label_dists,
        }
    }

    pub fn cal_sizes(&self) -> &[usize] {
        match self {
            DataSource::Synthetic(s) => &s.cal_sizes,
            DataSource::ScoreFile(s) => &s.cal_sizes,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.cal_sizes().len()
    }
}

impl ExperimentConfig {
    /// The toy label-shift experiment at `α = 0.1` with every method.
    pub fn toy(replications: usize, seed: u64) -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec::toy()),
            target_agent: 1,
            methods: all_methods(),
            alpha: 0.1,
            replications,
            seed,
            fed: FedConfig::default(),
            privacy: None,
            train_sizes: None,
            shared_subsample: false,
            output: None,
        }
    }

    /// Reads a `.toml` file, or JSON for any other extension, and validates it.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let config: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        };
        config.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha = {} must lie in [0, 1)", self.alpha)));
        }
        if self.replications == 0 {
            return Err(invalid("replications must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods selected"));
        }
        let n_agents = self.data.num_agents();
        if self.data.label_dists().len() != n_agents || n_agents == 0 {
            return Err(invalid(
                "need one label distribution and one calibration size per agent",
            ));
        }
        if self.target_agent >= n_agents {
            return Err(invalid(format!(
                "target_agent {} out of range for {n_agents} agents",
                self.target_agent
            )));
        }
        let n_labels = self.data.label_dists()[0].num_labels();
        if self.data.label_dists().iter().any(|d| d.num_labels() != n_labels) {
            return Err(invalid("label distributions differ in length"));
        }
        match &self.data {
            DataSource::Synthetic(spec) => spec.validate()?,
            DataSource::ScoreFile(src) => {
                if let Some(t) = src.temperature {
                    if !(t > 0.0) {
                        return Err(invalid("temperature must be positive"));
                    }
                }
            }
        }
        if self.data.cal_sizes().iter().sum::<usize>() == 0 {
            return Err(invalid("no calibration data"));
        }
        self.fed.validate()?;
        if let Some(s) = self.fed.subsample_size {
            if s > n_agents {
                return Err(invalid(format!("subsample_size {s} exceeds the {n_agents} agents")));
            }
        }
        if let Some(budget) = &self.privacy {
            budget.validate()?;
        }
        if let Some(sizes) = &self.train_sizes {
            if sizes.len() != n_agents {
                return Err(invalid("train_sizes needs one entry per agent"));
            }
        }
        Ok(())
    }

    /// Output path from the config, with `${VAR}` references expanded.
    pub fn resolved_output(&self) -> Result<Option<PathBuf>> {
        self.output
            .as_deref()
            .map(|p| expand_env(p).map(PathBuf::from))
            .transpose()
    }
}

/// Expands `${NAME}` references from the process environment.
pub fn expand_env(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| invalid(format!("unterminated `${{` in `{text}`")))?;
        let name = &after[..end];
        let value = std::env::var(name).map_err(|_| invalid(format!("environment variable `{name}` is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
