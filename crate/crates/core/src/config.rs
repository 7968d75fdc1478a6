//! The pipeline configuration document: profile defaults, JSON overrides and
//! the effective config echoed into every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anonymizer::AnonymizationConfig;
use crate::content::{CodebookConfig, ContentEncoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::prosody::ProsodyEncoderConfig;
use crate::synthesis::{DiscriminatorConfig, GeneratorConfig};
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const ECHO_FILE: &str = "config.json";
pub const RUN_DIR_ENV: &str = "VQANON_RUN_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Laptop-scale settings for the bundled corpus.
    Desk,
    /// Full-size network and schedule.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for default output directories; overridden by `VQANON_RUN_DIR`.
    pub run_root: PathBuf,
    /// Train on at most this many utterances, drawn round-robin across speakers.
    pub max_train_utterances: Option<usize>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_root: PathBuf::from("runs"),
            max_train_utterances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub profile: Profile,
    /// Root seed; copied into the training and anonymizer seeds.
    pub seed: u64,
    pub features: FeatureConfig,
    pub encoder: ContentEncoderConfig,
    pub codebook: CodebookConfig,
    pub prosody: ProsodyEncoderConfig,
    pub anonymizer: AnonymizationConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper)
    }
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self {
            schema_version: SCHEMA_VERSION,
            profile,
            seed: 0,
            features: FeatureConfig::default(),
            encoder: ContentEncoderConfig::default(),
            codebook: CodebookConfig::default(),
            prosody: ProsodyEncoderConfig::default(),
            anonymizer: AnonymizationConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            training: TrainConfig::default(),
            paths: PathsConfig::default(),
        };
        if profile == Profile::Desk {
            cfg.generator.base_channels = 256;
            cfg.discriminator.width_divisor = 16;
            cfg.training.batch_size = 8;
            cfg.training.crop_frames = 4;
            cfg.training.epochs = 2000;
            cfg.training.checkpoint_every_epochs = 500;
            cfg.paths.max_train_utterances = Some(4);
        }
        cfg
    }

    /// Profile defaults with `overrides` deep-merged on top. Unknown keys and
    /// schema mismatches are rejected.
    pub fn resolve(profile: Profile, overrides: Option<&Value>, seed: Option<u64>) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::for_profile(profile))?;
        if let Some(o) = overrides {
            if !o.is_object() {
                return Err(Error::Config("config must be a JSON object".into()));
            }
            if let Some(v) = o.get("schema_version") {
                if v.as_u64() != Some(SCHEMA_VERSION as u64) {
                    return Err(Error::Config(format!(
                        "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                    )));
                }
            }
            if let Some(p) = o.get("profile") {
                let named: Profile = serde_json::from_value(p.clone())
                    .map_err(|e| Error::Config(format!("profile: {e}")))?;
                if named != profile {
                    doc = serde_json::to_value(Self::for_profile(named))?;
                }
            }
            merge(&mut doc, o);
        }
        let mut cfg: Self =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.training.seed = cfg.seed;
        cfg.anonymizer.rng_seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, profile: Profile, seed: Option<u64>) -> Result<Self> {
        let overrides = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(
                    serde_json::from_str::<Value>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        Self::resolve(profile, overrides.as_ref(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.anonymizer.validate()?;
        self.training.validate()?;
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            codebook: self.codebook.clone(),
            prosody: self.prosody.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }

    /// `VQANON_RUN_DIR` when set, else `paths.run_root`.
    pub fn run_root(&self) -> PathBuf {
        std::env::var_os(RUN_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.paths.run_root.clone())
    }

    /// Writes the effective config to `dir/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Recursive object merge; non-object values in `over` replace those in `base`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
