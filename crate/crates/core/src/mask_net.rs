//! Shadow-aware mask generation.
//!
//! `M' = sigmoid(head(E2(D(E1(I ⊕ M)))))` where `E1`/`E2` are stacks of 3×3
//! conv + leaky rectifier with separate weights, `D` is a stack of residual
//! blocks and `head` is a 1×1 projection to one logit channel.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{FseError, Result};
use crate::imaging::{ImageTensor, MaskTensor};
use crate::ops::{conv2d, leaky_relu, sigmoid};
use crate::params::{conv_specs, NamedTensorMap, ParamSpec};

/// RGB image plus the single-channel initial mask.
pub const MASK_IN_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskNetConfig {
    pub base_channels: usize,
    pub num_extract_blocks: usize,
    pub num_residual_blocks: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_extract_blocks: 2,
            num_residual_blocks: 4,
        }
    }
}

impl MaskNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 || self.num_extract_blocks == 0 || self.num_residual_blocks == 0 {
            return Err(FseError::Config(format!(
                "mask net needs base_channels >= 8 and at least one block per stage, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.base_channels;
        let mut specs = Vec::new();
        for i in 0..self.num_extract_blocks {
            let ci = if i == 0 { MASK_IN_CHANNELS } else { c };
            specs.extend(conv_specs(&format!("mask.e1.{i}"), ci, c, 3, 1.0));
        }
        for i in 0..self.num_residual_blocks {
            specs.extend(conv_specs(&format!("mask.d.{i}.conv1"), c, c, 3, 1.0));
            specs.extend(conv_specs(&format!("mask.d.{i}.conv2"), c, c, 3, 0.5));
        }
        for i in 0..self.num_extract_blocks {
            specs.extend(conv_specs(&format!("mask.e2.{i}"), c, c, 3, 1.0));
        }
        specs.extend(conv_specs("mask.head", c, 1, 1, 1.0));
        specs
    }
}

/// Fan-in-scaled uniform weights, zero biases, deterministic per seed.
pub fn maskguide_init(config: &MaskNetConfig, seed: u64) -> Result<NamedTensorMap> {
    config.validate()?;
    NamedTensorMap::init(&config.param_specs(), seed, candle_core::DType::F32)
}

fn conv(params: &NamedTensorMap, prefix: &str, x: &Tensor) -> Result<Tensor> {
    conv2d(
        x,
        params.get(&format!("{prefix}.weight"))?,
        Some(params.get(&format!("{prefix}.bias"))?),
        1,
    )
}

/// Concatenates image channels 0–2 with the mask as channel 3.
pub(crate) fn image_mask_input(img: &ImageTensor, mask: &MaskTensor, what: &str) -> Result<Tensor> {
    let (n, c, h, w) = img.dims();
    let (mn, mc, mh, mw) = mask.dims();
    if c + mc != MASK_IN_CHANNELS || c != 3 {
        return Err(FseError::Shape(format!(
            "{what}: image ({c} ch) + mask ({mc} ch) must give {MASK_IN_CHANNELS} channels"
        )));
    }
    if (n, h, w) != (mn, mh, mw) {
        return Err(FseError::Shape(format!(
            "{what}: image {:?} vs mask {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    let m = mask.tensor().to_dtype(img.tensor().dtype())?;
    Ok(Tensor::cat(&[img.tensor(), &m], 1)?)
}

pub fn maskguide_forward(
    params: &NamedTensorMap,
    config: &MaskNetConfig,
    img: &ImageTensor,
    init_mask: &MaskTensor,
) -> Result<MaskTensor> {
    let dtype = params.dtype();
    let img = img.to_dtype(dtype)?;
    let mut x = image_mask_input(&img, init_mask, "mask net")?;
    for i in 0..config.num_extract_blocks {
        x = leaky_relu(&conv(params, &format!("mask.e1.{i}"), &x)?)?;
    }
    for i in 0..config.num_residual_blocks {
        let y = leaky_relu(&conv(params, &format!("mask.d.{i}.conv1"), &x)?)?;
        let y = conv(params, &format!("mask.d.{i}.conv2"), &y)?;
        x = (x + y)?;
    }
    for i in 0..config.num_extract_blocks {
        x = leaky_relu(&conv(params, &format!("mask.e2.{i}"), &x)?)?;
    }
    let logits = conv(params, "mask.head", &x)?;
    Ok(MaskTensor::from_trusted(sigmoid(&logits)?))
}
