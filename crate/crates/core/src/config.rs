//! Pipeline configuration, read from TOML. Every key is optional and
//! defaults to the settings of the reference recipe.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{GenerationConfig, HttpBackendConfig};
use crate::geometry::{CameraIntrinsics, GridSpec};
use crate::llm::LlmConfig;
use crate::prompt::PromptConfig;
use crate::render::RenderConfig;
use crate::vqa::QaTemplateSet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Asset catalog listing `id, mesh, synset[, facing]` lines.
    pub catalog: PathBuf,
    /// Root for the manifest, priors, images and logs.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            catalog: PathBuf::from("assets/catalog.csv"),
            output: PathBuf::from("out"),
        }
    }
}

impl PathsConfig {
    pub fn manifest(&self) -> PathBuf {
        self.output.join("manifest.jsonl")
    }

    pub fn progress_log(&self) -> PathBuf {
        self.output.join("progress.jsonl")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaMode {
    /// Three template items per image.
    #[default]
    Template,
    /// Template items followed by the consistent items an LLM proposes.
    TemplateAndLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqaConfig {
    pub mode: VqaMode,
    /// Mixed into every per-sample option shuffle.
    pub seed: u64,
    pub templates: QaTemplateSet,
    pub llm_temperature: f64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            mode: VqaMode::Template,
            seed: 0,
            templates: QaTemplateSet::default(),
            llm_temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Assets whose images form the benchmark split.
    pub benchmark_assets: Vec<String>,
    /// Additional share of assets, chosen by id hash, sent to the benchmark.
    pub benchmark_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcurrencyConfig {
    /// Samples in flight during generation.
    pub samples: usize,
    /// Concurrent calls to the model under test.
    pub eval: usize,
}

impl Default for ConcurrencyConfig {
    fn default() -> Self {
        Self { samples: 4, eval: 8 }
    }
}

/// Offline stand-ins for the external services.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub llm: bool,
    pub diffusion: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub camera: CameraIntrinsics,
    pub render: RenderConfig,
    pub grid: GridSpec,
    pub generation: GenerationConfig,
    pub prompt: PromptConfig,
    pub vqa: VqaConfig,
    pub split: SplitConfig,
    /// Description and QA writer.
    pub llm: LlmConfig,
    pub diffusion: HttpBackendConfig,
    /// Model evaluated on the benchmark.
    pub model: LlmConfig,
    /// Judge used when grading with an LLM.
    pub grader: LlmConfig,
    pub concurrency: ConcurrencyConfig,
    pub mock: MockConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Camera intrinsics at the render resolution.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.camera
            .with_resolution(self.render.resolution, self.render.resolution)
    }

    /// Checks everything except file paths.
    pub fn validate_settings(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.render.validate().map_err(|e| invalid(&e))?;
        self.intrinsics().validate().map_err(|e| invalid(&e))?;
        self.grid.validate().map_err(|e| invalid(&e))?;
        self.generation.validate().map_err(|e| invalid(&e))?;
        self.vqa.templates.validate().map_err(|e| invalid(&e))?;
        if self.prompt.max_attempts == 0 {
            return Err(ConfigError::Invalid("prompt.max_attempts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.split.benchmark_fraction) {
            return Err(ConfigError::Invalid(format!(
                "split.benchmark_fraction {} outside [0, 1]",
                self.split.benchmark_fraction
            )));
        }
        if self.concurrency.samples == 0 || self.concurrency.eval == 0 {
            return Err(ConfigError::Invalid("concurrency limits must be at least 1".into()));
        }
        Ok(())
    }

    /// Settings checks plus existence of the asset catalog.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_settings()?;
        if !self.paths.catalog.is_file() {
            return Err(ConfigError::Invalid(format!(
                "asset catalog {} does not exist",
                self.paths.catalog.display()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the settings that shape the dataset. Paths and
    /// concurrency limits are left out so relocated reruns match.
    pub fn digest(&self) -> String {
        let mut shaping = self.clone();
        shaping.paths = PathsConfig::default();
        shaping.concurrency = ConcurrencyConfig::default();
        hex::encode(Sha256::digest(shaping.to_toml().as_bytes()))
    }
}
