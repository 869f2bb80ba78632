//! Coarse shadow removal at full resolution.
//!
//! 3×3 stem on `I ⊕ M'`, a chain of aggregation blocks, a 3×3 head to three
//! channels and a global residual from the input image. Each aggregation
//! block runs dynamic convolutions at dilation rates `{1, d}` in parallel,
//! fuses them with a 1×1 convolution and adds the result to its input.
//!
//! A dynamic convolution mixes `K` expert kernels per sample with softmax
//! weights produced by a router (global average pool + linear map).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FseError, Result};
use crate::imaging::{ImageTensor, MaskTensor};
use crate::mask_net::{image_mask_input, MASK_IN_CHANNELS};
use crate::ops::{conv2d, conv2d_per_sample, leaky_relu, softmax_last_dim};
use crate::params::{conv_specs, Init, NamedTensorMap, ParamSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseNetConfig {
    pub base_channels: usize,
    pub num_agg_blocks: usize,
    pub dilation_rates: Vec<usize>,
    pub num_experts: usize,
    pub residual_scale: f64,
}

impl Default for CoarseNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 48,
            num_agg_blocks: 4,
            dilation_rates: vec![1, 2, 4, 8],
            num_experts: 4,
            residual_scale: 1.0,
        }
    }
}

/// Dilation rates of the parallel branches in a block with rate `d`.
pub fn branch_rates(d: usize) -> Vec<usize> {
    if d == 1 {
        vec![1]
    } else {
        vec![1, d]
    }
}

impl CoarseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.len() != self.num_agg_blocks {
            return Err(FseError::Config(format!(
                "{} aggregation blocks but {} dilation rates",
                self.num_agg_blocks,
                self.dilation_rates.len()
            )));
        }
        if self.dilation_rates.iter().any(|&d| d == 0) {
            return Err(FseError::Config("dilation rates must be positive".into()));
        }
        if self.num_experts == 0 || self.base_channels == 0 {
            return Err(FseError::Config(
                "coarse net needs at least one expert and one channel".into(),
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.base_channels;
        let k = self.num_experts;
        let mut specs = conv_specs("coarse.stem", MASK_IN_CHANNELS, c, 3, 1.0);
        for (i, &d) in self.dilation_rates.iter().enumerate() {
            let block = format!("coarse.agg{}", i + 1);
            let rates = branch_rates(d);
            for r in &rates {
                for e in 0..k {
                    specs.extend(conv_specs(
                        &format!("{block}.branch{r}.expert{e}"),
                        c,
                        c,
                        3,
                        1.0,
                    ));
                }
            }
            specs.push(ParamSpec::new(
                format!("{block}.router.weight"),
                &[k, c],
                Init::fan_in(c, 0.5),
            ));
            specs.push(ParamSpec::new(format!("{block}.router.bias"), &[k], Init::Const(0.0)));
            specs.extend(conv_specs(&format!("{block}.fuse"), rates.len() * c, c, 1, 0.5));
        }
        specs.extend(conv_specs("coarse.head", c, 3, 3, 0.1));
        specs
    }
}

pub fn coarse_init(config: &CoarseNetConfig, seed: u64) -> Result<NamedTensorMap> {
    config.validate()?;
    NamedTensorMap::init(&config.param_specs(), seed, DType::F32)
}

/// Expert kernels of one dilation branch.
#[derive(Debug, Clone)]
pub struct DynamicBranch {
    pub dilation: usize,
    /// `K` tensors of shape `[Co, Ci, 3, 3]`.
    pub expert_weights: Vec<Tensor>,
    /// `K` tensors of shape `[Co]`.
    pub expert_biases: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AggBlockParams {
    pub branches: Vec<DynamicBranch>,
    /// `[K, C]`
    pub router_weight: Tensor,
    /// `[K]`
    pub router_bias: Tensor,
    /// `[C, B*C, 1, 1]`
    pub fuse_weight: Tensor,
    pub fuse_bias: Tensor,
    pub residual_scale: f64,
}

impl AggBlockParams {
    /// Collects the tensors of block `index` (1-based) from the parameter map.
    pub fn from_map(
        params: &NamedTensorMap,
        config: &CoarseNetConfig,
        index: usize,
    ) -> Result<Self> {
        let d = *config
            .dilation_rates
            .get(index - 1)
            .ok_or_else(|| FseError::Config(format!("no aggregation block {index}")))?;
        let block = format!("coarse.agg{index}");
        let branches = branch_rates(d)
            .into_iter()
            .map(|r| -> Result<DynamicBranch> {
                let mut expert_weights = Vec::new();
                let mut expert_biases = Vec::new();
                for e in 0..config.num_experts {
                    let p = format!("{block}.branch{r}.expert{e}");
                    expert_weights.push(params.get(&format!("{p}.weight"))?.clone());
                    expert_biases.push(params.get(&format!("{p}.bias"))?.clone());
                }
                Ok(DynamicBranch {
                    dilation: r,
                    expert_weights,
                    expert_biases,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            router_weight: params.get(&format!("{block}.router.weight"))?.clone(),
            router_bias: params.get(&format!("{block}.router.bias"))?.clone(),
            fuse_weight: params.get(&format!("{block}.fuse.weight"))?.clone(),
            fuse_bias: params.get(&format!("{block}.fuse.bias"))?.clone(),
            residual_scale: config.residual_scale,
        })
    }

    /// Softmax expert weights `[N, K]` from globally pooled features.
    /// Computed in f64 and cast back.
    pub fn router_weights(&self, features: &Tensor) -> Result<Tensor> {
        let dtype = features.dtype();
        let pooled = features.mean((2, 3))?.to_dtype(DType::F64)?;
        let w = self.router_weight.to_dtype(DType::F64)?;
        let b = self.router_bias.to_dtype(DType::F64)?;
        let logits = pooled.matmul(&w.t()?)?.broadcast_add(&b.unsqueeze(0)?)?;
        Ok(softmax_last_dim(&logits)?.to_dtype(dtype)?)
    }
}

/// Per-sample convolution with the router-weighted sum of expert kernels.
pub fn dynamic_conv(
    features: &Tensor,
    expert_weights: &[Tensor],
    expert_biases: Option<&[Tensor]>,
    router_weights: &Tensor,
    dilation: usize,
) -> Result<Tensor> {
    let (n, _, _, _) = features.dims4()?;
    let k = expert_weights.len();
    let (rn, rk) = router_weights.dims2()?;
    if rn != n || rk != k || k == 0 {
        return Err(FseError::Shape(format!(
            "router weights {:?} do not match {n} samples x {k} experts",
            router_weights.dims()
        )));
    }
    let rows = router_weights.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (i, row) in rows.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < -1e-12) {
            return Err(FseError::Numeric(format!(
                "router weights of sample {i} are not on the simplex (sum {s})"
            )));
        }
    }
    let kernel_dims = expert_weights[0].dims().to_vec();
    let flat: Vec<Tensor> = expert_weights
        .iter()
        .map(|w| w.flatten_all())
        .collect::<candle_core::Result<_>>()?;
    let stacked = Tensor::stack(&flat, 0)?;
    let mixed = router_weights.matmul(&stacked)?;
    let mut shape = vec![n];
    shape.extend(&kernel_dims);
    let kernels = mixed.reshape(shape)?;
    let bias = match expert_biases {
        Some(b) => Some(router_weights.matmul(&Tensor::stack(b, 0)?)?),
        None => None,
    };
    conv2d_per_sample(features, &kernels, bias.as_ref(), dilation)
}

/// `features + scale · fuse(concat_b leaky(dynconv_b(features)))`.
pub fn agg_block_forward(params: &AggBlockParams, features: &Tensor) -> Result<Tensor> {
    let router = params.router_weights(features)?;
    let branches = params
        .branches
        .iter()
        .map(|b| {
            leaky_relu(&dynamic_conv(
                features,
                &b.expert_weights,
                Some(&b.expert_biases),
                &router,
                b.dilation,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = Tensor::cat(&branches, 1)?;
    let fused = conv2d(&cat, &params.fuse_weight, Some(&params.fuse_bias), 1)?;
    let update = if params.residual_scale == 1.0 {
        fused
    } else {
        fused.affine(params.residual_scale, 0.0)?
    };
    Ok((features + update)?)
}

/// Features after the stem and after each aggregation block.
pub fn coarse_features(
    params: &NamedTensorMap,
    config: &CoarseNetConfig,
    img: &ImageTensor,
    refined_mask: &MaskTensor,
) -> Result<Vec<Tensor>> {
    let x = image_mask_input(img, refined_mask, "coarse net")?;
    let mut x = leaky_relu(&conv2d(
        &x,
        params.get("coarse.stem.weight")?,
        Some(params.get("coarse.stem.bias")?),
        1,
    )?)?;
    let mut out = vec![x.clone()];
    for i in 1..=config.num_agg_blocks {
        let block = AggBlockParams::from_map(params, config, i)?;
        x = agg_block_forward(&block, &x)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// `C = I + head(AggBlocks(stem(I ⊕ M')))`; no clamping.
pub fn coarse_forward(
    params: &NamedTensorMap,
    config: &CoarseNetConfig,
    img: &ImageTensor,
    refined_mask: &MaskTensor,
) -> Result<ImageTensor> {
    let img = img.to_dtype(params.dtype())?;
    let feats = coarse_features(params, config, &img, refined_mask)?;
    let last = feats.last().expect("stem output always present");
    let delta = conv2d(
        last,
        params.get("coarse.head.weight")?,
        Some(params.get("coarse.head.bias")?),
        1,
    )?;
    Ok(ImageTensor::from_model((img.tensor() + delta)?))
}
