//! Layered configuration: a named profile supplies every default, and a
//! JSON file overrides exactly the keys it spells out. Anything
//! unrecognized is an error naming the key, so typos surface before any
//! work starts.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

use crate::datagen::GeneratorConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalrun::TrainingConfig;

/// Default groups behind `--profile`: `paper` keeps the published-scale
/// encoder and training settings; `desk` shrinks the attention stack so
/// the full pipeline runs in seconds on a laptop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Paper,
    Desk,
}

/// Evaluation-side defaults used when a flag is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Effective-click threshold, in seconds.
    pub theta_s: f64,
}

impl Default for EvaluationConfig {
    fn default() -> EvaluationConfig {
        EvaluationConfig { theta_s: 5.0 }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_s > 0.0) || !self.theta_s.is_finite() {
            return Err(Error::Config(format!(
                "evaluation theta_s must be a positive number of seconds, got {}",
                self.theta_s
            )));
        }
        Ok(())
    }
}

/// Where data lives and how news embeddings are sourced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding `news.jsonl`, `train.jsonl`, `test.jsonl`.
    pub data_dir: PathBuf,
    /// Embedding store file (TSV or binary). When absent, a synthetic
    /// store is derived from the news catalog's topic mixtures.
    pub embeddings: Option<PathBuf>,
    /// Seed for the derived synthetic store.
    pub embedding_seed: u64,
    /// Noise scale of the derived synthetic store.
    pub embedding_noise: f64,
}

impl Default for PathsConfig {
    fn default() -> PathsConfig {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            embeddings: None,
            embedding_seed: 7,
            embedding_noise: 0.05,
        }
    }
}

impl PathsConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.embedding_noise.is_finite() || self.embedding_noise < 0.0 {
            return Err(Error::Config(format!(
                "paths embedding_noise must be non-negative, got {}",
                self.embedding_noise
            )));
        }
        Ok(())
    }
}

/// Everything a run needs, in five sections. Serializes to the same JSON
/// shape it is loaded from, so a saved config is itself a valid input.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub paths: PathsConfig,
}

impl AppConfig {
    /// The complete default configuration of a profile.
    pub fn for_profile(profile: Profile) -> AppConfig {
        let mut cfg = AppConfig::default();
        if profile == Profile::Desk {
            cfg.encoder.h = 2;
            cfg.encoder.a = 8;
            cfg.encoder.attpool_dim = Some(32);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.training.validate()?;
        self.evaluation.validate()?;
        self.paths.validate()
    }
}

const SECTIONS: [&str; 5] = ["generator", "encoder", "training", "evaluation", "paths"];

/// Parse configuration text over a profile's defaults. An empty file is a
/// valid configuration that changes nothing.
pub fn parse_config(text: &str, profile: Profile) -> Result<AppConfig> {
    let user: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text)?
    };
    let Value::Object(user) = user else {
        return Err(Error::Config(
            "configuration root must be a JSON object".into(),
        ));
    };
    for key in user.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown configuration section `{key}` (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
    }
    let defaults = AppConfig::for_profile(profile);
    let cfg = AppConfig {
        generator: section(&user, "generator", &defaults.generator)?,
        encoder: section(&user, "encoder", &defaults.encoder)?,
        training: section(&user, "training", &defaults.training)?,
        evaluation: section(&user, "evaluation", &defaults.evaluation)?,
        paths: section(&user, "paths", &defaults.paths)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Load and parse a configuration file.
pub fn load_config(path: &Path, profile: Profile) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read configuration {}: {e}", path.display()))
    })?;
    parse_config(&text, profile)
}

/// Write the canonical (fully populated, pretty-printed) form.
pub fn save_config(cfg: &AppConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// One section: the profile's defaults with the user's keys merged in.
/// Deserialization errors come back with the key's full path.
fn section<T>(user: &serde_json::Map<String, Value>, name: &str, default: &T) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut merged = serde_json::to_value(default)?;
    if let Some(over) = user.get(name) {
        deep_merge(&mut merged, over.clone());
    }
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." {
            name.to_string()
        } else {
            format!("{name}.{path}")
        };
        Error::Config(format!("configuration key `{at}`: {}", e.inner()))
    })
}

fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
