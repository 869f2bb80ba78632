//! TOML run configuration for `fse train`.
//!
//! ```toml
//! profile = "desk"          # "desk" (64-pixel crops) or "full" (default)
//! seed = 7                  # optional, overrides train.seed
//! output = "runs/a"         # optional output directory
//! perceptual_backend = "fallback"
//!
//! [data]
//! train_dir = "data/train"  # required: shadow/, target/, optional mask/
//! manifest = "data/ids.txt" # optional id list
//!
//! [model]                   # any FseConfig field, merged over the profile
//! coarse = { num_experts = 2 }
//!
//! [train]                   # any TrainConfig field; total_steps is required
//! total_steps = 1000
//! lr_init = 2e-4
//! ```
//!
//! Unknown keys at any level are rejected by name.

use std::path::{Path, PathBuf};

use fse_core::config::{FseConfig, TrainConfig};
use fse_core::{FseError, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Full,
    Desk,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_dir: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    perceptual_backend: Option<String>,
    data: DataSection,
    #[serde(default)]
    model: Table,
    train: Table,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfigFile {
    pub profile: Profile,
    pub output: Option<PathBuf>,
    pub perceptual_backend: Option<String>,
    pub data: DataSection,
    pub model: FseConfig,
    pub train: TrainConfig,
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn to_table<T: serde::Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| FseError::Config(format!("cannot encode defaults: {e}")))
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> FseError {
    FseError::Config(format!("{}: {}", path.display(), e.to_string().trim()))
}

impl RunConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| config_err(path, e))?;
        let (model_base, train_base) = match raw.profile {
            Profile::Full => (FseConfig::default(), TrainConfig::new(0)),
            Profile::Desk => (FseConfig::desk(), TrainConfig::desk(0)),
        };

        let mut model = to_table(&model_base)?;
        merge(&mut model, &raw.model);
        let model: FseConfig = Value::Table(model)
            .try_into()
            .map_err(|e| config_err(path, format!("[model]: {e}")))?;

        let mut train = to_table(&train_base)?;
        train.remove("total_steps");
        merge(&mut train, &raw.train);
        let mut train: TrainConfig = Value::Table(train)
            .try_into()
            .map_err(|e| config_err(path, format!("[train]: {e}")))?;
        if let Some(seed) = raw.seed {
            train.seed = seed;
        }
        model.validate()?;
        train.validate()?;
        Ok(Self {
            profile: raw.profile,
            output: raw.output,
            perceptual_backend: raw.perceptual_backend,
            data: raw.data,
            model,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FseError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        // relative data paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.train_dir = base.join(&cfg.data.train_dir);
        cfg.data.manifest = cfg.data.manifest.map(|m| base.join(m));
        cfg.output = cfg.output.map(|o| base.join(o));
        Ok(cfg)
    }
}
