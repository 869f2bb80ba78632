//! Model and training configuration.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coarse_net::CoarseNetConfig;
use crate::error::{FseError, Result};
use crate::imaging::{Rotation, DEFAULT_MASK_TAU};
use crate::mask_net::MaskNetConfig;
use crate::metrics::LossWeights;
use crate::params::ParamSpec;
use crate::refine_net::RefineNetConfig;

/// Architecture of all three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FseConfig {
    pub mask: MaskNetConfig,
    pub coarse: CoarseNetConfig,
    pub refine: RefineNetConfig,
}

impl FseConfig {
    /// Desk-scale profile for 64×64 inputs: window 4 and halved widths.
    pub fn desk() -> Self {
        Self {
            mask: MaskNetConfig {
                base_channels: 16,
                ..Default::default()
            },
            coarse: CoarseNetConfig {
                base_channels: 24,
                ..Default::default()
            },
            refine: RefineNetConfig {
                embed_dim: 24,
                window_size: 4,
                irc_hidden: 16,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.coarse.validate()?;
        self.refine.validate()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.mask.param_specs();
        specs.extend(self.coarse.param_specs());
        specs.extend(self.refine.param_specs());
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mask,
    Coarse,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Mask, Stage::Coarse, Stage::Refine];

    /// Parameter-name prefix owned by this stage.
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Mask => "mask.",
            Stage::Coarse => "coarse.",
            Stage::Refine => "refine.",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Mask => "mask",
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
        })
    }
}

pub type StageSet = BTreeSet<Stage>;

pub fn all_stages() -> StageSet {
    Stage::ALL.into_iter().collect()
}

fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    2e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_wd() -> f64 {
    1e-4
}
fn d_eps() -> f64 {
    1e-8
}
fn d_crop() -> usize {
    256
}
fn d_true() -> bool {
    true
}
fn d_rotations() -> Vec<Rotation> {
    Rotation::ALL.to_vec()
}
fn d_tau() -> f64 {
    DEFAULT_MASK_TAU
}

/// Optimization settings. `total_steps` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr_init: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    pub total_steps: usize,
    /// Linear warm-up steps before the cosine decay.
    #[serde(default)]
    pub warm_steps: usize,
    #[serde(default = "d_crop")]
    pub crop_size: usize,
    #[serde(default = "d_true")]
    pub enable_hflip: bool,
    #[serde(default = "d_rotations")]
    pub rotation_choices: Vec<Rotation>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "all_stages")]
    pub stages: StageSet,
    /// Luminance threshold for the initial mask.
    #[serde(default = "d_tau")]
    pub mask_tau: f64,
    /// Probability of replacing a sample's initial mask by zeros, which is
    /// what the model sees at inference time.
    #[serde(default)]
    pub init_mask_dropout: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(total_steps: usize) -> Self {
        Self {
            batch_size: d_batch(),
            lr_init: d_lr(),
            lr_min: 0.0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            weight_decay: d_wd(),
            eps: d_eps(),
            total_steps,
            warm_steps: 0,
            crop_size: d_crop(),
            enable_hflip: true,
            rotation_choices: d_rotations(),
            seed: 0,
            loss_weights: LossWeights::default(),
            stages: all_stages(),
            mask_tau: d_tau(),
            init_mask_dropout: 0.0,
            checkpoint_every: 0,
        }
    }

    /// Desk-scale counterpart of [`FseConfig::desk`]: 64-pixel crops, batch 4.
    pub fn desk(total_steps: usize) -> Self {
        Self {
            batch_size: 4,
            crop_size: 64,
            init_mask_dropout: 0.5,
            ..Self::new(total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FseError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return fail(format!("lr_init must be > 0, got {}", self.lr_init));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return fail(format!("lr_min must lie in [0, lr_init], got {}", self.lr_min));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return fail("weight_decay must be >= 0 and eps > 0".into());
        }
        if self.warm_steps > self.total_steps {
            return fail(format!(
                "warm_steps {} exceeds total_steps {}",
                self.warm_steps, self.total_steps
            ));
        }
        if self.crop_size == 0 {
            return fail("crop_size must be positive".into());
        }
        if self.stages.is_empty() {
            return fail("at least one stage must be enabled".into());
        }
        if !(0.0..=1.0).contains(&self.init_mask_dropout) {
            return fail(format!(
                "init_mask_dropout must lie in [0, 1], got {}",
                self.init_mask_dropout
            ));
        }
        if !(self.mask_tau >= 0.0 && self.mask_tau < 1.0) {
            return fail(format!("mask_tau must lie in [0, 1), got {}", self.mask_tau));
        }
        self.loss_weights.validate()
    }
}
