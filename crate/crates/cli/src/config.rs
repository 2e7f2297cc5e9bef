use std::path::{Path, PathBuf};

use oculus::align::AlignConfig;
use oculus::lm::SftConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default artifact root.
pub const ARTIFACT_ENV: &str = "OCULUS_ARTIFACTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub oct_only: bool,
    pub standard_infonce: bool,
    pub random_encoder: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            oct_only: true,
            standard_infonce: true,
            random_encoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out samples to generate reports for; 0 means all of them.
    pub max_samples: usize,
    pub probe_lambda: f64,
    pub retrieval_k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_samples: 0,
            probe_lambda: 1.0,
            retrieval_k: vec![1, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory; falls back to the environment variable, then to
    /// `artifacts`.
    pub artifact_dir: Option<PathBuf>,
    /// Cohort file name inside the artifact directory.
    pub cohort_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort_size: usize,
    pub split_ratio: f64,
    pub align: AlignConfig,
    pub sft: SftConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            cohort_size: 2560,
            split_ratio: 0.8,
            align: AlignConfig::default(),
            sft: SftConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to toml")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.cohort_size < 4 {
            return Err(CliError::Config("cohort_size must be at least 4".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if !(self.eval.probe_lambda > 0.0) || self.eval.retrieval_k.contains(&0) {
            return Err(CliError::Config("eval probe_lambda must be positive and retrieval_k at least 1".into()));
        }
        self.align.validate().map_err(CliError::from_core)?;
        self.sft.validate().map_err(CliError::from_core)?;
        if self.sft.decoder.vocab != oculus::report::Vocabulary::standard().len() {
            return Err(CliError::Config(format!(
                "sft.decoder.vocab must be {}",
                oculus::report::Vocabulary::standard().len()
            )));
        }
        Ok(())
    }

    /// Resolves the artifact directory: explicit override, then config,
    /// then environment, then `artifacts`.
    pub fn artifact_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        if let Some(p) = override_dir {
            return p.to_path_buf();
        }
        if let Some(p) = &self.paths.artifact_dir {
            return p.clone();
        }
        match std::env::var_os(ARTIFACT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("artifacts"),
        }
    }

    pub fn cohort_file(&self) -> PathBuf {
        self.paths
            .cohort_file
            .clone()
            .unwrap_or_else(|| PathBuf::from("cohort.ndjson"))
    }
}
