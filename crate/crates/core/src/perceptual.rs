//! Pluggable feature extractors for the perceptual distance term.
//!
//! Pretrained perceptual networks cannot be bundled, so the default is a
//! fixed random convolutional stack. Its numbers are flagged as a proxy in
//! every report.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::container::read_container;
use crate::error::{FseError, Result};
use crate::ops::conv2d;
use crate::params::{conv_specs, NamedTensorMap, ParamSpec};

/// Seed of the fallback stack's weights.
pub const FALLBACK_SEED: u64 = 0x5EED_F5E0;
/// Channel widths of the fallback stack (input, then after each layer).
pub const FALLBACK_CHANNELS: [usize; 4] = [3, 16, 16, 16];
pub const FALLBACK_DILATIONS: [usize; 3] = [1, 2, 4];
const NORM_EPS: f64 = 1e-10;

/// Maps an image batch `[N, 3, H, W]` in `[0, 1]` to a list of feature maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    /// True when the features are not from a pretrained perceptual network.
    fn is_proxy(&self) -> bool;

    fn name(&self) -> String;
}

/// Stack of conv + tanh layers; each layer's activation is one feature map.
/// Inputs are rescaled to `[-1, 1]` first. The activation is smooth so the
/// perceptual term has no kinks.
#[derive(Debug, Clone)]
pub struct ConvStackBackend {
    layers: Vec<(Tensor, Tensor, usize)>,
    proxy: bool,
    name: String,
}

impl ConvStackBackend {
    /// The deterministic random-feature stack.
    pub fn fallback() -> Self {
        let mut specs: Vec<ParamSpec> = Vec::new();
        for i in 0..FALLBACK_DILATIONS.len() {
            specs.extend(conv_specs(
                &format!("layer{i}"),
                FALLBACK_CHANNELS[i],
                FALLBACK_CHANNELS[i + 1],
                3,
                1.0,
            ));
        }
        let p = NamedTensorMap::init(&specs, FALLBACK_SEED, DType::F64)
            .expect("fallback specs are well formed");
        let layers = (0..FALLBACK_DILATIONS.len())
            .map(|i| {
                (
                    p.get(&format!("layer{i}.weight")).unwrap().clone(),
                    p.get(&format!("layer{i}.bias")).unwrap().clone(),
                    FALLBACK_DILATIONS[i],
                )
            })
            .collect();
        Self {
            layers,
            proxy: true,
            name: "fallback".into(),
        }
    }

    /// Loads `layer{i}.weight` `[Co, Ci, k, k]` / `layer{i}.bias` `[Co]` for
    /// `i = 0, 1, ...` from a tensor container. An optional `dilations`
    /// array in the container metadata sets per-layer dilation (default 1).
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(path)?;
        let dilations: Vec<usize> = match meta.get("dilations") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| {
                FseError::Format(format!("{}: bad `dilations`: {e}", path.display()))
            })?,
            None => Vec::new(),
        };
        let mut layers = Vec::new();
        let mut prev_co = 3;
        while let Some(w) = tensors.get(&format!("layer{}.weight", layers.len())) {
            let i = layers.len();
            let dims = w.dims();
            if dims.len() != 4 || dims[1] != prev_co || dims[2] != dims[3] || dims[2] % 2 == 0 {
                return Err(FseError::Shape(format!(
                    "{}: layer{i}.weight has shape {dims:?}, expected [Co, {prev_co}, k, k] with odd k",
                    path.display()
                )));
            }
            let b = tensors.get(&format!("layer{i}.bias")).ok_or_else(|| {
                FseError::Format(format!("{}: missing layer{i}.bias", path.display()))
            })?;
            if b.dims() != [dims[0]] {
                return Err(FseError::Shape(format!(
                    "{}: layer{i}.bias has shape {:?}",
                    path.display(),
                    b.dims()
                )));
            }
            prev_co = dims[0];
            let d = dilations.get(i).copied().unwrap_or(1).max(1);
            layers.push((w.to_dtype(DType::F64)?, b.to_dtype(DType::F64)?, d));
        }
        if layers.is_empty() {
            return Err(FseError::Format(format!(
                "{}: no `layer0.weight` tensor found",
                path.display()
            )));
        }
        Ok(Self {
            layers,
            proxy: false,
            name: path.display().to_string(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(weight, bias, dilation)` of layer `i`, stored in `f64`.
    pub fn layer(&self, i: usize) -> (&Tensor, &Tensor, usize) {
        let (w, b, d) = &self.layers[i];
        (w, b, *d)
    }
}

/// Alias kept for readability at call sites that want the fallback.
pub type RandomConvBackend = ConvStackBackend;

impl FeatureExtractor for ConvStackBackend {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = x.dtype();
        let mut h = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, d) in &self.layers {
            h = conv2d(&h, &w.to_dtype(dtype)?, Some(&b.to_dtype(dtype)?), *d)?.tanh()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn is_proxy(&self) -> bool {
        self.proxy
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

/// Scales every spatial feature vector to unit length across channels.
pub fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Differentiable `Σ_layers mean((n(φ(pred)) − n(φ(target)))²)`.
pub fn perceptual_distance_tensor(
    pred: &Tensor,
    target: &Tensor,
    backend: &dyn FeatureExtractor,
) -> Result<Tensor> {
    let fp = backend.features(pred)?;
    let ft = backend.features(target)?;
    if fp.len() != ft.len() || fp.is_empty() {
        return Err(FseError::Shape(format!(
            "feature extractor `{}` returned {} vs {} layers",
            backend.name(),
            fp.len(),
            ft.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let d = (unit_normalize(a)? - unit_normalize(b)?)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Resolves a backend selector: `Some("fallback")`, `Some(path)`, or `None`
/// (fallback when `allow_fallback`, otherwise a configuration error).
pub fn resolve_backend(
    selector: Option<&str>,
    allow_fallback: bool,
) -> Result<Box<dyn FeatureExtractor>> {
    match selector {
        Some("fallback") => Ok(Box::new(ConvStackBackend::fallback())),
        Some(path) => Ok(Box::new(ConvStackBackend::load(Path::new(path))?)),
        None if allow_fallback => Ok(Box::new(ConvStackBackend::fallback())),
        None => Err(FseError::Config(
            "no perceptual backend configured; pass `--perceptual-backend <path>` \
             for a feature-extractor file or `--perceptual-backend fallback` for the \
             random-feature proxy"
                .into(),
        )),
    }
}
