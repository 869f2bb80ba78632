//! Cosine learning-rate schedule and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{FseError, Result};
use crate::params::NamedTensorMap;

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total))`; steps past `total`
/// clamp to `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return if step == 0 && total == 0 { lr_init } else { lr_min };
    }
    let t = step as f64 / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear warm-up over `warm` steps, then cosine decay over the rest.
pub fn scheduled_lr(step: usize, total: usize, warm: usize, lr_init: f64, lr_min: f64) -> f64 {
    if step < warm {
        lr_init * (step + 1) as f64 / warm as f64
    } else {
        cosine_lr(step - warm, total - warm, lr_init, lr_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// First/second moments (`adam.m.<name>`, `adam.v.<name>`) and the number of
/// updates applied so far.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub moments: NamedTensorMap,
}

pub fn moment_names(param: &str) -> (String, String) {
    (format!("adam.m.{param}"), format!("adam.v.{param}"))
}

impl AdamState {
    /// Zero moments for every parameter in `params`.
    pub fn new(params: &NamedTensorMap) -> Result<Self> {
        let mut moments = NamedTensorMap::new();
        for (name, var) in params.iter() {
            let (m, v) = moment_names(name);
            moments.insert(&m, var.zeros_like()?)?;
            moments.insert(&v, var.zeros_like()?)?;
        }
        Ok(Self { step: 0, moments })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            step: self.step,
            moments: self.moments.deep_clone()?,
        })
    }
}

/// One AdamW update of every parameter named in `grads`:
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step(
    params: &NamedTensorMap,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    for name in grads.keys() {
        let (m, v) = moment_names(name);
        if !params.contains(name) || !state.moments.contains(&m) || !state.moments.contains(&v) {
            return Err(FseError::State(format!(
                "gradient `{name}` has no matching parameter or optimizer moments"
            )));
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get(name)?;
        if g.dims() != p.dims() {
            return Err(FseError::Shape(format!(
                "gradient `{name}` {:?} vs parameter {:?}",
                g.dims(),
                p.dims()
            )));
        }
        let g = g.to_dtype(p.dtype())?;
        let (mn, vn) = moment_names(name);
        let m = state.moments.get(&mn)?;
        let v = state.moments.get(&vn)?;
        let m_new = (m.affine(hp.beta1, 0.0)? + g.affine(1.0 - hp.beta1, 0.0)?)?;
        let v_new = (v.affine(hp.beta2, 0.0)? + g.sqr()?.affine(1.0 - hp.beta2, 0.0)?)?;
        let decayed = p.affine(1.0 - hp.lr * hp.weight_decay, 0.0)?;
        let denom = (v_new.affine(1.0 / bc2, 0.0)?.sqrt()? + hp.eps)?;
        let step = m_new.affine(hp.lr / bc1, 0.0)?.div(&denom)?;
        let p_new = (decayed - step)?;
        params.set(name, &p_new)?;
        state.moments.set(&mn, &m_new)?;
        state.moments.set(&vn, &v_new)?;
    }
    state.step = t;
    Ok(())
}

/// Zero tensor shaped like `like`, for parameters the loss does not reach.
pub(crate) fn zero_grad(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros(like.dims(), like.dtype(), like.device())?)
}
