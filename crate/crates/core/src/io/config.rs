//! TOML run configuration.
//!
//! Every key has a default and unknown keys are rejected. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GenerationConfig, ModelConfig};
use crate::objectives::SpanMaskSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Record files; each file is one dataset named after its file stem.
    pub datasets: Vec<PathBuf>,
    /// Upper bound on the vocabulary built at pretraining time.
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            max_vocab: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model dimensions. Pretraining uses the defaults when absent and
    /// replaces `vocab_size` by the size of the built vocabulary; finetuning
    /// takes the checkpoint's and only checks a given section against it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub span: SpanMaskSpec,
    pub generation: GenerationConfig,
    pub output_dir: PathBuf,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            span: SpanMaskSpec::default(),
            generation: GenerationConfig::default(),
            output_dir: PathBuf::from("run"),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.generation.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and makes its paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.data.datasets {
            *d = base.join(&*d);
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
