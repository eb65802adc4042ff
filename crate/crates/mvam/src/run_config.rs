//! Run configuration: one TOML file unifying model, trainer, data, and
//! synthetic-corpus settings, plus dotted-path command-line overrides
//! (`--set train.learning_rate=0.05`). Every field has a default, so an
//! empty file is a valid config; unknown keys are rejected as typos.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::data::DEFAULT_MAX_DOC_LEN;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus file. Required for training and evaluation on real data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file; when absent one is built from the train split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    /// Pretrained embedding file; absent means random initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Minimum train-split frequency for a token to enter a built
    /// vocabulary.
    pub min_freq: usize,
    /// Documents longer than this keep only their head.
    pub max_doc_len: usize,
    /// Keep only this many most-frequent labels; 0 keeps all.
    pub top_labels: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            corpus: None,
            vocab: None,
            embeddings: None,
            min_freq: 1,
            max_doc_len: DEFAULT_MAX_DOC_LEN,
            top_labels: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for checkpoints, logs, and the effective-config echo.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> OutputConfig {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        RunConfig::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The effective configuration, echoable back into `from_toml_str`.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config encode error: {e}")))
    }

    /// Applies `key.path=value` overrides in order. Values use TOML syntax
    /// (so `true`, `0.05`, and `[1, 2]` get their natural types); a value
    /// that does not parse as TOML is retried as a string, which covers
    /// unquoted paths and enum names.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, settings: &[S]) -> Result<()> {
        if settings.is_empty() {
            return Ok(());
        }
        let mut tree = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(format!("config encode error: {e}")))?;
        for setting in settings {
            let patch = parse_override(setting.as_ref())?;
            merge(&mut tree, patch);
        }
        *self = tree
            .try_into()
            .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
        Ok(())
    }

    /// Field-level validation that tolerates the corpus-dependent zero
    /// sentinels in the model section; those are checked again once
    /// resolved against actual data.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.num_labels == 0 {
            model.num_labels = 1;
        }
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.data.min_freq == 0 {
            return Err(Error::Config("data.min_freq must be at least 1".into()));
        }
        if self.data.max_doc_len == 0 {
            return Err(Error::Config("data.max_doc_len must be at least 1".into()));
        }
        Ok(())
    }
}

fn parse_override(setting: &str) -> Result<toml::Value> {
    let bad = |details: String| Error::Config(details);
    let (key, value) = setting
        .split_once('=')
        .ok_or_else(|| bad(format!("override '{setting}' is not of the form key.path=value")))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(bad(format!("override '{setting}' has an empty key")));
    }
    let typed = format!("{key} = {value}");
    toml::from_str::<toml::Value>(&typed)
        .or_else(|_| {
            let escaped = value.replace('\\', "\\\\").replace('"', "\\\"");
            toml::from_str::<toml::Value>(&format!("{key} = \"{escaped}\""))
        })
        .map_err(|e| bad(format!("cannot parse override '{setting}': {e}")))
}

/// Tables merge recursively; anything else replaces the previous value.
fn merge(dst: &mut toml::Value, src: toml::Value) {
    match (dst, src) {
        (toml::Value::Table(dst), toml::Value::Table(src)) => {
            for (key, value) in src {
                match dst.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        dst.insert(key, value);
                    }
                }
            }
        }
        (dst, src) => *dst = src,
    }
}
