//! Pipeline configuration, read from TOML, with desk-scale and full-scale presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Aggregation, AutoencoderConfig, IntervalSpec};
use crate::nn::ModelConfig;
use crate::sampler::{CostModel, SamplerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Assembly source of the program under study.
    pub asm: PathBuf,
    /// Optional initial register and memory state.
    pub init: Option<PathBuf>,
    /// Directory receiving every artifact.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            asm: PathBuf::from("program.s"),
            init: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    pub max_instructions: u64,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            max_instructions: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    /// Records between labelled training snapshots.
    pub cadence: u64,
    /// Cap on labelled snapshots drawn from the trace; 0 means no cap.
    pub max_examples: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            cadence: 97,
            max_examples: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub aggregation: Aggregation,
    /// Unit-normalise interval embeddings before clustering.
    pub normalize: bool,
    pub autoencoder: AutoencoderConfig,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            aggregation: Aggregation::Mean,
            normalize: true,
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    /// Number of random-representative runs summarised by their median.
    pub random_runs: usize,
    /// Random projection width for BBVs; 0 keeps every block.
    pub bbv_projection: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            random_runs: 20,
            bbv_projection: 0,
        }
    }
}

/// Everything one pipeline run needs. `seed` has no default: it must come
/// from the file or the command line, and it overrides every per-stage seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub trace: TraceSettings,
    pub interval: IntervalSpec,
    pub model: ModelConfig,
    pub training: TrainingSettings,
    pub embedding: EmbeddingSettings,
    pub sampler: SamplerConfig,
    pub baseline: BaselineSettings,
    pub cost: CostModel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = PipelineConfig {
            seed: None,
            paths: Paths::default(),
            trace: TraceSettings::default(),
            interval: IntervalSpec::default(),
            model: ModelConfig::desk(),
            training: TrainingSettings::default(),
            embedding: EmbeddingSettings::default(),
            sampler: SamplerConfig::default(),
            baseline: BaselineSettings::default(),
            cost: CostModel::default(),
        };
        match p {
            Preset::Desk => desk,
            Preset::Paper => PipelineConfig {
                trace: TraceSettings {
                    max_instructions: 200_000_000,
                },
                interval: IntervalSpec {
                    interval_length: 10_000_000,
                    ..IntervalSpec::default()
                },
                model: ModelConfig::paper(),
                training: TrainingSettings {
                    cadence: 50,
                    max_examples: 0,
                },
                ..desk
            },
        }
    }

    /// Parses TOML layered over `preset`; relative paths are resolved
    /// against `base`.
    pub fn from_toml(text: &str, preset: Preset, base: &Path) -> Result<Self, ConfigError> {
        let overlay: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        merge(&mut merged, overlay);
        let mut cfg: PipelineConfig = merged.try_into()?;
        cfg.paths.asm = base.join(&cfg.paths.asm);
        cfg.paths.out = base.join(&cfg.paths.out);
        cfg.paths.init = cfg.paths.init.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text, preset, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks consistency and pushes the master seed into every stage.
    pub fn finalize(mut self) -> Result<Self, ConfigError> {
        let seed = self
            .seed
            .ok_or_else(|| ConfigError::Invalid("a seed is required (set `seed` or pass --seed)".into()))?;
        self.model.seed = seed;
        self.sampler.seed = seed ^ 0x5a5a_0001;
        self.embedding.autoencoder.seed = seed ^ 0x5a5a_0002;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.interval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.trace.max_instructions == 0 {
            return Err(ConfigError::Invalid("trace.max_instructions must be positive".into()));
        }
        if self.training.cadence == 0 {
            return Err(ConfigError::Invalid("training.cadence must be positive".into()));
        }
        if self.sampler.maxk == 0 || self.sampler.restarts == 0 {
            return Err(ConfigError::Invalid("sampler.maxk and sampler.restarts must be positive".into()));
        }
        if !(self.sampler.threshold > 0.0 && self.sampler.threshold <= 1.0) {
            return Err(ConfigError::Invalid("sampler.threshold must be in (0, 1]".into()));
        }
        if self.cost.cache_lines == 0 || self.cost.line_bytes == 0 {
            return Err(ConfigError::Invalid("cost cache geometry must be positive".into()));
        }
        Ok(self)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
