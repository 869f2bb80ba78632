//! Facial-aware refinement: `R = C + AHSWA(C) ⊙ IRC(C, M')`.
//!
//! The attention branch embeds `C`, then runs `num_scales` stages of
//! windowed multi-head self-attention at window sizes `w, 2w, ...`, each
//! stage alternating regular and cyclically shifted windows. Every block is
//! pre-normalized attention with a relative position bias, a depthwise 3×3
//! convolution and a pointwise feed-forward, all residual.
//! Nonlinearities in this stage are GELU, which keeps it smooth everywhere.
//!
//! The illumination branch embeds `C` and applies three mask-conditioned
//! modulation blocks `f ← (γ(M') ⊙ W_γ + β(M')) ⊙ f` before projecting back
//! to three channels.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FseError, Result};
use crate::imaging::{ImageTensor, MaskTensor};
use crate::ops::{
    channel_layer_norm, conv2d, depthwise_conv2d, reflect_pad_bottom_right,
    softmax_last_dim,
};
use crate::params::{conv_specs, Init, NamedTensorMap, ParamSpec};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineNetConfig {
    pub embed_dim: usize,
    pub window_size: usize,
    pub num_heads: usize,
    /// Attention blocks per scale, alternating regular / shifted.
    pub depth: usize,
    pub num_scales: usize,
    pub irc_blocks: usize,
    pub irc_hidden: usize,
    pub ffn_ratio: usize,
}

impl Default for RefineNetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 48,
            window_size: 8,
            num_heads: 4,
            depth: 2,
            num_scales: 2,
            irc_blocks: 3,
            irc_hidden: 32,
            ffn_ratio: 2,
        }
    }
}

impl RefineNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(FseError::Config("window_size must be >= 2".into()));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(FseError::Config(format!(
                "depth must be even (regular/shifted pairs), got {}",
                self.depth
            )));
        }
        if self.irc_blocks != 3 {
            return Err(FseError::Config(format!(
                "illumination branch uses exactly 3 modulation blocks, got {}",
                self.irc_blocks
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(FseError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_scales == 0 || self.irc_hidden == 0 || self.ffn_ratio == 0 {
            return Err(FseError::Config("refine net sizes must be positive".into()));
        }
        Ok(())
    }

    /// Configured window size of scale `s` (1-based).
    pub fn scale_window(&self, s: usize) -> usize {
        self.window_size * s
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let e = self.embed_dim;
        let hidden = e * self.ffn_ratio;
        let mut specs = conv_specs("refine.embed", 3, e, 3, 1.0);
        for s in 1..=self.num_scales {
            let win = self.scale_window(s);
            for b in 0..self.depth {
                let p = format!("refine.s{s}.b{b}");
                for norm in ["norm1", "norm2"] {
                    specs.push(ParamSpec::new(format!("{p}.{norm}.weight"), &[e], Init::Const(1.0)));
                    specs.push(ParamSpec::new(format!("{p}.{norm}.bias"), &[e], Init::Const(0.0)));
                }
                specs.push(ParamSpec::new(format!("{p}.qkv.weight"), &[3 * e, e], Init::fan_in(e, 0.5)));
                specs.push(ParamSpec::new(format!("{p}.qkv.bias"), &[3 * e], Init::Const(0.0)));
                specs.push(ParamSpec::new(format!("{p}.proj.weight"), &[e, e], Init::fan_in(e, 0.5)));
                specs.push(ParamSpec::new(format!("{p}.proj.bias"), &[e], Init::Const(0.0)));
                specs.push(ParamSpec::new(
                    format!("{p}.bias_table"),
                    &[(2 * win - 1) * (2 * win - 1), self.num_heads],
                    Init::Uniform { bound: 0.02 },
                ));
                specs.push(ParamSpec::new(format!("{p}.dw.weight"), &[e, 1, 3, 3], Init::fan_in(9, 0.3)));
                specs.push(ParamSpec::new(format!("{p}.dw.bias"), &[e], Init::Const(0.0)));
                specs.extend(conv_specs(&format!("{p}.ffn.fc1"), e, hidden, 1, 1.0));
                specs.extend(conv_specs(&format!("{p}.ffn.fc2"), hidden, e, 1, 0.5));
            }
        }
        specs.extend(conv_specs("refine.head", e, 3, 3, 0.5));

        let f = self.irc_hidden;
        specs.extend(conv_specs("refine.irc.embed", 3, f, 3, 1.0));
        for i in 1..=self.irc_blocks {
            let p = format!("refine.irc.b{i}");
            for branch in ["gamma", "beta"] {
                specs.extend(conv_specs(&format!("{p}.{branch}.fc1"), 1, f, 1, 1.0));
                specs.push(ParamSpec::new(format!("{p}.{branch}.fc2.weight"), &[f, f, 1, 1], Init::Const(0.0)));
                let out_bias = if branch == "beta" { 1.0 } else { 0.0 };
                specs.push(ParamSpec::new(format!("{p}.{branch}.fc2.bias"), &[f], Init::Const(out_bias)));
            }
            specs.push(ParamSpec::new(format!("{p}.wgamma"), &[f], Init::Const(1.0)));
        }
        specs.extend(conv_specs("refine.irc.head", f, 3, 1, 0.5));
        specs
    }
}

pub fn refine_init(config: &RefineNetConfig, seed: u64) -> Result<NamedTensorMap> {
    config.validate()?;
    NamedTensorMap::init(&config.param_specs(), seed, DType::F32)
}

// ---------------------------------------------------------------------------
// Window partitioning

/// Bookkeeping needed to undo a window partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn padded(&self) -> (usize, usize) {
        (self.height + self.pad_h, self.width + self.pad_w)
    }

    pub fn num_windows(&self) -> usize {
        let (ph, pw) = self.padded();
        self.batch * (ph / self.window) * (pw / self.window)
    }
}

/// `[N, C, H, W]` -> `[N·(Hp/w)·(Wp/w), w², C]`.
///
/// Bottom/right edges are reflect-padded to a multiple of `w`, then the map is
/// cyclically shifted by `(-shift, -shift)` before partitioning.
pub fn window_partition(x: &Tensor, window: usize, shift: usize) -> Result<(Tensor, WindowLayout)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || (shift != 0 && shift != window / 2) {
        return Err(FseError::Config(format!(
            "window {window} with shift {shift}: shift must be 0 or window/2"
        )));
    }
    let pad_h = (window - h % window) % window;
    let pad_w = (window - w % window) % window;
    if pad_h >= h || pad_w >= w {
        return Err(FseError::Config(format!(
            "window {window} is too large for a {h}x{w} map"
        )));
    }
    let layout = WindowLayout {
        batch: n,
        channels: c,
        height: h,
        width: w,
        pad_h,
        pad_w,
        window,
        shift,
    };
    let mut y = if pad_h > 0 || pad_w > 0 {
        reflect_pad_bottom_right(x, pad_h, pad_w)?
    } else {
        x.clone()
    };
    if shift > 0 {
        y = y.roll(-(shift as i32), 2)?.roll(-(shift as i32), 3)?;
    }
    let (ph, pw) = layout.padded();
    let (nh, nw) = (ph / window, pw / window);
    let windows = y
        .permute((0, 2, 3, 1))?
        .reshape((n, nh, window, nw, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((n * nh * nw, window * window, c))?;
    Ok((windows, layout))
}

/// Inverse of [`window_partition`]: un-partition, un-shift, un-pad.
pub fn window_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let (ph, pw) = layout.padded();
    let win = layout.window;
    let (nh, nw) = (ph / win, pw / win);
    let c = windows.dim(2)?;
    let mut y = windows
        .reshape((layout.batch, nh, nw, win, win, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((layout.batch, ph, pw, c))?
        .permute((0, 3, 1, 2))?;
    if layout.shift > 0 {
        let s = layout.shift as i32;
        y = y.roll(s, 2)?.roll(s, 3)?;
    }
    if layout.pad_h > 0 || layout.pad_w > 0 {
        y = y.narrow(2, 0, layout.height)?.narrow(3, 0, layout.width)?;
    }
    Ok(y.contiguous()?)
}

// ---------------------------------------------------------------------------
// Relative position bias

/// Learned bias table plus the map from (query, key) token pairs to rows.
#[derive(Debug, Clone)]
pub struct RelPosBiasTable {
    /// `[(2w−1)², heads]`
    pub table: Tensor,
    /// Row-major `[e², e²]` for the effective window `e ≤ w`.
    pub index: Vec<u32>,
    pub table_window: usize,
    pub window: usize,
}

/// Offsets `(dy, dx)` between tokens of an `e × e` window, encoded as rows of a
/// `(2w−1)²` table (`e ≤ w`).
pub fn relative_position_index(window: usize, table_window: usize) -> Vec<u32> {
    let t = window * window;
    let side = 2 * table_window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qy, qx) = ((q / window) as isize, (q % window) as isize);
        for k in 0..t {
            let (ky, kx) = ((k / window) as isize, (k % window) as isize);
            let dy = (qy - ky + table_window as isize - 1) as usize;
            let dx = (qx - kx + table_window as isize - 1) as usize;
            idx.push((dy * side + dx) as u32);
        }
    }
    idx
}

impl RelPosBiasTable {
    pub fn new(table: Tensor, table_window: usize, window: usize) -> Result<Self> {
        if window > table_window {
            return Err(FseError::Config(format!(
                "window {window} exceeds bias table window {table_window}"
            )));
        }
        Ok(Self {
            table,
            index: relative_position_index(window, table_window),
            table_window,
            window,
        })
    }

    /// `[heads, T, T]` bias for one window.
    pub fn bias(&self) -> Result<Tensor> {
        let t = self.window * self.window;
        let heads = self.table.dim(1)?;
        let idx = Tensor::from_vec(self.index.clone(), self.index.len(), &Device::Cpu)?;
        Ok(self
            .table
            .index_select(&idx, 0)?
            .reshape((t, t, heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }
}

// ---------------------------------------------------------------------------
// Attention

/// Linear map over the last axis: `x @ Wᵀ + b`.
fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / last;
    let out = x
        .reshape((rows, last))?
        .matmul(&weight.t()?)?
        .broadcast_add(bias)?;
    let mut shape = dims;
    *shape.last_mut().unwrap() = weight.dim(0)?;
    Ok(out.reshape(shape)?)
}

/// Multi-head scaled dot-product attention inside each window.
///
/// `windows` is `[B, T, E]`; `bias` is `[heads, T, T]`. Returns the projected
/// output `[B, T, E]` and the attention probabilities `[B, heads, T, T]`.
pub fn window_attention(
    windows: &Tensor,
    qkv_weight: &Tensor,
    qkv_bias: &Tensor,
    proj_weight: &Tensor,
    proj_bias: &Tensor,
    bias: Option<&Tensor>,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (b, t, e) = windows.dims3()?;
    let hd = e / heads;
    let qkv = linear(windows, qkv_weight, qkv_bias)?
        .reshape((b, t, 3, heads, hd))?
        .permute((2, 0, 3, 1, 4))?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores = q.matmul(&k.t()?)?.affine(scale, 0.0)?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(&bias.unsqueeze(0)?)?;
    }
    let probs = softmax_last_dim(&scores)?;
    let out = probs
        .matmul(&v)?
        .transpose(1, 2)?
        .reshape((b, t, e))?;
    Ok((linear(&out, proj_weight, proj_bias)?, probs))
}

/// Effective window and shift for an `h × w` map: windows never exceed the
/// map, and a window clamped to the map is not shifted.
pub fn effective_window(window: usize, shifted: bool, h: usize, w: usize) -> (usize, usize) {
    let eff = window.min(h).min(w);
    let shift = if shifted && eff == window { window / 2 } else { 0 };
    (eff, shift)
}

fn attention_block(
    params: &NamedTensorMap,
    config: &RefineNetConfig,
    scale: usize,
    block: usize,
    x: &Tensor,
    probes: &mut Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let p = format!("refine.s{scale}.b{block}");
    let g = |n: &str| params.get(&format!("{p}.{n}"));
    let (_, _, h, w) = x.dims4()?;
    let table_window = config.scale_window(scale);
    let (win, shift) = effective_window(table_window, block % 2 == 1, h, w);

    let y = channel_layer_norm(x, g("norm1.weight")?, g("norm1.bias")?, NORM_EPS)?;
    let (windows, layout) = window_partition(&y, win, shift)?;
    let bias = RelPosBiasTable::new(g("bias_table")?.clone(), table_window, win)?.bias()?;
    let (attn, probs) = window_attention(
        &windows,
        g("qkv.weight")?,
        g("qkv.bias")?,
        g("proj.weight")?,
        g("proj.bias")?,
        Some(&bias),
        config.num_heads,
    )?;
    if let Some(store) = probes.as_mut() {
        store.push(probs);
    }
    let x = (x + window_reverse(&attn, &layout)?)?;
    let x = (&x + depthwise_conv2d(&x, g("dw.weight")?, Some(g("dw.bias")?))?)?;
    let y = channel_layer_norm(&x, g("norm2.weight")?, g("norm2.bias")?, NORM_EPS)?;
    let y = conv2d(&y, g("ffn.fc1.weight")?, Some(g("ffn.fc1.bias")?), 1)?.gelu()?;
    let y = conv2d(&y, g("ffn.fc2.weight")?, Some(g("ffn.fc2.bias")?), 1)?;
    Ok((x + y)?)
}

fn ahswa_impl(
    params: &NamedTensorMap,
    config: &RefineNetConfig,
    coarse: &ImageTensor,
    mut probes: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let (_, c, _, _) = coarse.dims();
    if c != 3 {
        return Err(FseError::Shape(format!("refinement expects 3 channels, got {c}")));
    }
    let mut x = conv2d(
        coarse.tensor(),
        params.get("refine.embed.weight")?,
        Some(params.get("refine.embed.bias")?),
        1,
    )?;
    for s in 1..=config.num_scales {
        for b in 0..config.depth {
            x = attention_block(params, config, s, b, &x, &mut probes)?;
        }
    }
    conv2d(
        &x,
        params.get("refine.head.weight")?,
        Some(params.get("refine.head.bias")?),
        1,
    )
}

/// Attention branch output `[N, 3, H, W]`.
pub fn ahswa_forward(
    params: &NamedTensorMap,
    config: &RefineNetConfig,
    coarse: &ImageTensor,
) -> Result<Tensor> {
    let coarse = coarse.to_dtype(params.dtype())?;
    ahswa_impl(params, config, &coarse, None)
}

/// Attention probabilities of every block, in execution order.
pub fn ahswa_attention_maps(
    params: &NamedTensorMap,
    config: &RefineNetConfig,
    coarse: &ImageTensor,
) -> Result<Vec<Tensor>> {
    let coarse = coarse.to_dtype(params.dtype())?;
    let mut probes = Vec::new();
    ahswa_impl(params, config, &coarse, Some(&mut probes))?;
    Ok(probes)
}

// ---------------------------------------------------------------------------
// Illumination modulation

/// `(gamma ⊙ W_γ + beta) ⊙ features`; `wgamma` is per-channel `[F]`.
pub fn irc_modulate(
    features: &Tensor,
    gamma: &Tensor,
    wgamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let f = wgamma.dim(0)?;
    let scale = gamma
        .broadcast_mul(&wgamma.reshape((1, f, 1, 1))?)?
        .add(beta)?;
    Ok(features.mul(&scale)?)
}

fn pointwise_mlp(params: &NamedTensorMap, prefix: &str, m: &Tensor) -> Result<Tensor> {
    let g = |n: &str| params.get(&format!("{prefix}.{n}"));
    let y = conv2d(m, g("fc1.weight")?, Some(g("fc1.bias")?), 1)?.gelu()?;
    conv2d(&y, g("fc2.weight")?, Some(g("fc2.bias")?), 1)
}

/// Illumination branch output `[N, 3, H, W]`.
pub fn irc_forward(
    params: &NamedTensorMap,
    config: &RefineNetConfig,
    coarse: &ImageTensor,
    refined_mask: &MaskTensor,
) -> Result<Tensor> {
    let dtype = params.dtype();
    let coarse = coarse.to_dtype(dtype)?;
    let (n, c, h, w) = coarse.dims();
    let (mn, _, mh, mw) = refined_mask.dims();
    if c != 3 || (n, h, w) != (mn, mh, mw) {
        return Err(FseError::Shape(format!(
            "illumination branch: coarse {:?} vs mask {:?}",
            coarse.dims(),
            refined_mask.dims()
        )));
    }
    let m = refined_mask.tensor().to_dtype(dtype)?;
    let mut f = conv2d(
        coarse.tensor(),
        params.get("refine.irc.embed.weight")?,
        Some(params.get("refine.irc.embed.bias")?),
        1,
    )?
    .gelu()?;
    for i in 1..=config.irc_blocks {
        let p = format!("refine.irc.b{i}");
        let gamma = pointwise_mlp(params, &format!("{p}.gamma"), &m)?;
        let beta = pointwise_mlp(params, &format!("{p}.beta"), &m)?;
        f = irc_modulate(&f, &gamma, params.get(&format!("{p}.wgamma"))?, &beta)?;
    }
    conv2d(
        &f,
        params.get("refine.irc.head.weight")?,
        Some(params.get("refine.irc.head.bias")?),
        1,
    )
}

/// `R = C + AHSWA(C) ⊙ IRC(C, M')`.
pub fn refine_forward(
    params: &NamedTensorMap,
    config: &RefineNetConfig,
    coarse: &ImageTensor,
    refined_mask: &MaskTensor,
) -> Result<ImageTensor> {
    let coarse = coarse.to_dtype(params.dtype())?;
    let global = ahswa_forward(params, config, &coarse)?;
    let local = irc_forward(params, config, &coarse, refined_mask)?;
    Ok(ImageTensor::from_model(
        (coarse.tensor() + global.mul(&local)?)?,
    ))
}
