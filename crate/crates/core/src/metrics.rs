//! Image-quality metrics and the composite training loss
//! `L = MSE + λ1·(1 − SSIM) + λ2·perceptual`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FseError, Result};
use crate::imaging::ImageTensor;
use crate::ops::scalar_f64;
use crate::perceptual::{perceptual_distance_tensor, FeatureExtractor};

/// PSNR reported when the MSE is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(FseError::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Differentiable mean squared error (scalar tensor).
pub fn mse_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

pub fn mse(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    check_same_shape(pred, target, "mse")?;
    let p = pred.tensor().to_dtype(DType::F64)?;
    let t = target.tensor().to_dtype(DType::F64)?;
    scalar_f64(&mse_tensor(&p, &t)?)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(pred: &ImageTensor, target: &ImageTensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, peak))
}

/// Normalized 1-D Gaussian of `size` taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// `[len − size + 1, len]` matrix whose rows are shifted copies of the window,
/// so that `M @ x` is a "valid" 1-D filtering of `x`.
fn band_matrix(len: usize, window: &[f64], dtype: DType) -> Result<Tensor> {
    let k = window.len();
    let out = len - k + 1;
    let mut m = vec![0.0f64; out * len];
    for i in 0..out {
        m[i * len + i..i * len + i + k].copy_from_slice(window);
    }
    Ok(Tensor::from_vec(m, (out, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Separable "valid" Gaussian blur of `[N, C, H, W]`.
struct GaussianBlur {
    rows: Tensor,
    cols_t: Tensor,
}

impl GaussianBlur {
    fn new(h: usize, w: usize, dtype: DType) -> Result<Self> {
        let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        Ok(Self {
            rows: band_matrix(h, &g, dtype)?,
            cols_t: band_matrix(w, &g, dtype)?.t()?.contiguous()?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.rows.broadcast_matmul(x)?.broadcast_matmul(&self.cols_t)?)
    }
}

/// Differentiable mean SSIM over all valid 11×11 windows, channels and samples.
pub fn ssim_tensor(pred: &Tensor, target: &Tensor, peak: f64) -> Result<Tensor> {
    let (_, _, h, w) = pred.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FseError::Config(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let blur = GaussianBlur::new(h, w, pred.dtype())?;
    let mu1 = blur.apply(pred)?;
    let mu2 = blur.apply(target)?;
    let mu1_sq = mu1.sqr()?;
    let mu2_sq = mu2.sqr()?;
    let mu12 = (&mu1 * &mu2)?;
    let s1 = (blur.apply(&pred.sqr()?)? - &mu1_sq)?;
    let s2 = (blur.apply(&target.sqr()?)? - &mu2_sq)?;
    let s12 = (blur.apply(&(pred * target)?)? - &mu12)?;
    let num = ((mu12.affine(2.0, c1))? * s12.affine(2.0, c2)?)?;
    let den = (((mu1_sq + mu2_sq)? + c1)? * ((s1 + s2)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

pub fn ssim(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    check_same_shape(pred, target, "ssim")?;
    let p = pred.tensor().to_dtype(DType::F64)?;
    let t = target.tensor().to_dtype(DType::F64)?;
    scalar_f64(&ssim_tensor(&p, &t, 1.0)?)
}

pub fn perceptual_distance(
    pred: &ImageTensor,
    target: &ImageTensor,
    backend: &dyn FeatureExtractor,
) -> Result<f64> {
    check_same_shape(pred, target, "perceptual distance")?;
    let p = pred.tensor().to_dtype(DType::F64)?;
    let t = target.tensor().to_dtype(DType::F64)?;
    scalar_f64(&perceptual_distance_tensor(&p, &t, backend)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub aux_mask_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.2,
            aux_mask_weight: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.aux_mask_weight]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(FseError::Config(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Total loss (differentiable) and its unweighted terms.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub mse: Tensor,
    /// `1 − SSIM`
    pub ssim_term: Tensor,
    pub perceptual: Tensor,
}

impl LossTerms {
    /// `(total, mse, ssim_term, perceptual)` as `f64`.
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        Ok((
            scalar_f64(&self.total)?,
            scalar_f64(&self.mse)?,
            scalar_f64(&self.ssim_term)?,
            scalar_f64(&self.perceptual)?,
        ))
    }
}

/// `mse + λ1·(1 − ssim) + λ2·perceptual`. Terms with zero weight are still
/// reported but contribute nothing to the total (or its gradient).
pub fn composite_loss(
    pred: &ImageTensor,
    target: &ImageTensor,
    weights: &LossWeights,
    backend: &dyn FeatureExtractor,
) -> Result<LossTerms> {
    check_same_shape(pred, target, "composite loss")?;
    weights.validate()?;
    let p = pred.tensor();
    let t = target.tensor().to_dtype(p.dtype())?;
    let mse = mse_tensor(p, &t)?;
    let ssim_term = ssim_tensor(p, &t, 1.0)?.affine(-1.0, 1.0)?;
    let perceptual = perceptual_distance_tensor(p, &t, backend)?;
    let mut total = mse.clone();
    if weights.lambda1 != 0.0 {
        total = (total + ssim_term.affine(weights.lambda1, 0.0)?)?;
    }
    if weights.lambda2 != 0.0 {
        total = (total + perceptual.affine(weights.lambda2, 0.0)?)?;
    }
    Ok(LossTerms {
        total,
        mse,
        ssim_term,
        perceptual,
    })
}

/// Dataset-averaged evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub lpips: Option<f64>,
    /// True when `lpips` comes from the random-feature fallback extractor.
    pub proxy: bool,
    pub n_samples: usize,
}

impl MetricReport {
    /// Flat `key=value` record, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("psnr_db={}\nssim={}\nmse={}\n", self.psnr, self.ssim, self.mse);
        match (self.lpips, self.proxy) {
            (Some(v), true) => s.push_str(&format!("lpips_proxy={v}\n")),
            (Some(v), false) => s.push_str(&format!("lpips={v}\n")),
            (None, _) => s.push_str("lpips=unavailable\n"),
        }
        s.push_str(&format!("n_samples={}\n", self.n_samples));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut psnr = None;
        let mut ssim = None;
        let mut mse = None;
        let mut lpips = None;
        let mut proxy = false;
        let mut n = None;
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| FseError::Format(format!("report field `{k}` is not a number: `{v}`")))
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FseError::Format(format!("malformed report line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "psnr_db" => psnr = Some(num(k, v)?),
                "ssim" => ssim = Some(num(k, v)?),
                "mse" => mse = Some(num(k, v)?),
                "lpips" if v == "unavailable" => lpips = None,
                "lpips" => lpips = Some(num(k, v)?),
                "lpips_proxy" => {
                    lpips = Some(num(k, v)?);
                    proxy = true;
                }
                "n_samples" => {
                    n = Some(v.parse::<usize>().map_err(|_| {
                        FseError::Format(format!("report field `n_samples` is not an integer: `{v}`"))
                    })?)
                }
                other => return Err(FseError::Format(format!("unknown report field `{other}`"))),
            }
        }
        let missing = |k: &str| FseError::Format(format!("report is missing `{k}`"));
        Ok(Self {
            psnr: psnr.ok_or_else(|| missing("psnr_db"))?,
            ssim: ssim.ok_or_else(|| missing("ssim"))?,
            mse: mse.ok_or_else(|| missing("mse"))?,
            lpips,
            proxy,
            n_samples: n.ok_or_else(|| missing("n_samples"))?,
        })
    }
}

/// Renders labelled reports as an aligned table (one row per method, one
/// PSNR/SSIM/MSE/LPIPS column group per dataset).
pub fn render_table(rows: &[(String, String, MetricReport)]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for (m, d, _) in rows {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
        if !datasets.contains(&d.as_str()) {
            datasets.push(d);
        }
    }
    let cell = 9;
    let name_w = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<name_w$}", "Method");
    for d in &datasets {
        out.push_str(&format!(" | {:^width$}", d, width = 4 * cell + 3));
    }
    out.push('\n');
    out.push_str(&" ".repeat(name_w));
    for _ in &datasets {
        out.push_str(&format!(
            " | {:>cell$} {:>cell$} {:>cell$} {:>cell$}",
            "PSNR", "SSIM", "MSE", "LPIPS"
        ));
    }
    out.push('\n');
    let any_proxy = rows.iter().any(|(_, _, r)| r.proxy);
    for m in &methods {
        out.push_str(&format!("{m:<name_w$}"));
        for d in &datasets {
            match rows.iter().find(|(rm, rd, _)| rm == m && rd == d) {
                Some((_, _, r)) => {
                    let lp = match r.lpips {
                        Some(v) if r.proxy => format!("{v:.3}*"),
                        Some(v) => format!("{v:.3}"),
                        None => "n/a".to_string(),
                    };
                    out.push_str(&format!(
                        " | {:>cell$.2} {:>cell$.3} {:>cell$.3} {:>cell$}",
                        r.psnr, r.ssim, r.mse, lp
                    ));
                }
                None => out.push_str(&format!(" | {:>w$}", "-", w = 4 * cell + 3)),
            }
        }
        out.push('\n');
    }
    if any_proxy {
        out.push_str("* perceptual distance from the random-feature proxy extractor\n");
    }
    out
}
