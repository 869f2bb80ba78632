//! Three-stage composition `R = refine ∘ coarse ∘ mask`, with stage ablation.

use candle_core::DType;

use crate::coarse_net::coarse_forward;
use crate::config::{FseConfig, Stage, StageSet};
use crate::error::{FseError, Result};
use crate::imaging::{ImageTensor, MaskTensor};
use crate::mask_net::maskguide_forward;
use crate::params::NamedTensorMap;
use crate::refine_net::refine_forward;

/// Parameters for all three stages, deterministic per seed.
pub fn fse_init(config: &FseConfig, seed: u64) -> Result<NamedTensorMap> {
    config.validate()?;
    NamedTensorMap::init(&config.param_specs(), seed, DType::F32)
}

#[derive(Debug, Clone)]
pub struct FseOutput {
    pub restored: ImageTensor,
    pub mask: MaskTensor,
    pub coarse: ImageTensor,
}

/// Runs the enabled stages. A disabled mask stage passes the initial mask
/// through, a disabled coarse stage yields `C = I`, and a disabled refine
/// stage yields `R = C`.
pub fn fse_forward(
    params: &NamedTensorMap,
    config: &FseConfig,
    img: &ImageTensor,
    init_mask: &MaskTensor,
    stages: &StageSet,
) -> Result<FseOutput> {
    if stages.is_empty() {
        return Err(FseError::Config("at least one stage must be enabled".into()));
    }
    let (n, _, h, w) = img.dims();
    let (mn, _, mh, mw) = init_mask.dims();
    if (n, h, w) != (mn, mh, mw) {
        return Err(FseError::Shape(format!(
            "image {:?} vs initial mask {:?}",
            img.dims(),
            init_mask.dims()
        )));
    }
    let dtype = params.dtype();
    let img = img.to_dtype(dtype)?;
    let mask = if stages.contains(&Stage::Mask) {
        maskguide_forward(params, &config.mask, &img, init_mask)?
    } else {
        init_mask.to_dtype(dtype)?
    };
    let coarse = if stages.contains(&Stage::Coarse) {
        coarse_forward(params, &config.coarse, &img, &mask)?
    } else {
        img.clone()
    };
    let restored = if stages.contains(&Stage::Refine) {
        refine_forward(params, &config.refine, &coarse, &mask)?
    } else {
        coarse.clone()
    };
    Ok(FseOutput {
        restored,
        mask,
        coarse,
    })
}

/// Inference: detached forward pass with a zero initial mask unless one is
/// given; the restored image is clamped to `[0, 1]`.
pub fn fse_infer(
    params: &NamedTensorMap,
    config: &FseConfig,
    img: &ImageTensor,
    init_mask: Option<&MaskTensor>,
    stages: &StageSet,
) -> Result<FseOutput> {
    let (n, _, h, w) = img.dims();
    let zero;
    let m = match init_mask {
        Some(m) => m,
        None => {
            zero = MaskTensor::zeros(n, h, w, params.dtype())?;
            &zero
        }
    };
    let out = fse_forward(params, config, img, m, stages)?;
    Ok(FseOutput {
        restored: ImageTensor::new(out.restored.tensor().detach())?.clamped()?,
        mask: MaskTensor::new(out.mask.tensor().detach())?,
        coarse: ImageTensor::new(out.coarse.tensor().detach())?,
    })
}
