//! Training checkpoints: parameters, optimizer moments, configuration, step
//! counter and generator state in one tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{FseConfig, TrainConfig};
use crate::container::{decode_container, encode_container, read_container, write_container};
use crate::error::{FseError, Result};
use crate::optim::AdamState;
use crate::params::NamedTensorMap;

const FORMAT: &str = "fse-checkpoint";
const VERSION: u64 = 1;

/// Generator state of a training run. Every random draw of step `s` comes
/// from a ChaCha8 stream keyed by `(seed, s)`, so the seed and the next step
/// fully determine all remaining randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: RngAlgorithm,
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RngAlgorithm {
    Chacha8StepStreams,
}

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub params: NamedTensorMap,
    pub optimizer: AdamState,
    pub fse_config: FseConfig,
    pub train_config: TrainConfig,
    pub step: usize,
    pub rng: RngState,
}

impl CheckpointBundle {
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            params: self.params.deep_clone()?,
            optimizer: self.optimizer.deep_clone()?,
            fse_config: self.fse_config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            rng: self.rng,
        })
    }

    fn parts(&self) -> (Value, Vec<(String, candle_core::Tensor)>) {
        let meta = json!({
            "format": FORMAT,
            "version": VERSION,
            "step": self.step,
            "optimizer_step": self.optimizer.step,
            "rng": self.rng,
            "config": {"model": self.fse_config, "train": self.train_config},
        });
        let tensors = self
            .params
            .iter()
            .chain(self.optimizer.moments.iter())
            .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
            .collect();
        (meta, tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (meta, tensors) = self.parts();
        encode_container(&meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode_container(bytes)?;
        Self::from_parts(meta, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (meta, tensors) = self.parts();
        write_container(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(path)?;
        Self::from_parts(meta, tensors).map_err(|e| match e {
            FseError::Checkpoint(m) => FseError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_parts(
        meta: Value,
        tensors: std::collections::BTreeMap<String, candle_core::Tensor>,
    ) -> Result<Self> {
        let bad = |m: String| FseError::Checkpoint(m);
        if meta.get("format").and_then(Value::as_str) != Some(FORMAT) {
            return Err(bad("not a training checkpoint".into()));
        }
        if meta.get("version").and_then(Value::as_u64) != Some(VERSION) {
            return Err(bad(format!("unsupported version {:?}", meta.get("version"))));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let cfg = field("config")?;
        let fse_config: FseConfig =
            serde_json::from_value(cfg.get("model").cloned().unwrap_or(Value::Null))
                .map_err(|e| bad(format!("bad model config: {e}")))?;
        let train_config: TrainConfig =
            serde_json::from_value(cfg.get("train").cloned().unwrap_or(Value::Null))
                .map_err(|e| bad(format!("bad train config: {e}")))?;
        let step = field("step")?
            .as_u64()
            .ok_or_else(|| bad("`step` is not an integer".into()))? as usize;
        let opt_step = field("optimizer_step")?
            .as_u64()
            .ok_or_else(|| bad("`optimizer_step` is not an integer".into()))?;
        let rng: RngState =
            serde_json::from_value(field("rng")?).map_err(|e| bad(format!("bad rng state: {e}")))?;

        let mut params = NamedTensorMap::new();
        let mut moments = NamedTensorMap::new();
        for (name, t) in tensors {
            if name.starts_with("adam.") {
                moments.insert(&name, t)?;
            } else {
                params.insert(&name, t)?;
            }
        }
        params
            .validate(&fse_config.param_specs())
            .map_err(|e| bad(format!("parameters do not match the stored config: {e}")))?;
        Ok(Self {
            params,
            optimizer: AdamState {
                step: opt_step,
                moments,
            },
            fse_config,
            train_config,
            step,
            rng,
        })
    }
}
