//! Fused softmax and channel normalization with hand-written gradients.
//! Composing them from elementary ops costs several passes over memory in
//! both directions, which dominates the attention stage on a CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what} expects a contiguous tensor"),
    }
}

macro_rules! dispatch1 {
    ($storage:expr, $layout:expr, $what:expr, $f:expr) => {
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $layout, $what)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $layout, $what)?)),
            _ => candle_core::bail!("{} supports f32 and f64 only", $what),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $what:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous(a, $l1, $what)?, contiguous(b, $l2, $what)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous(a, $l1, $what)?, contiguous(b, $l2, $what)?))
            }
            _ => candle_core::bail!("{} needs two f32 or two f64 tensors", $what),
        }
    };
}

// ---------------------------------------------------------------------------
// Softmax over the last axis

pub(crate) struct Softmax;
struct SoftmaxGrad;

fn softmax_rows<T: WithDType>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![0f64; d];
    for row in x.chunks_exact(d) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (b, v) in buf.iter_mut().zip(row) {
            *b = (v.to_f64() - max).exp();
            sum += *b;
        }
        out.extend(buf.iter().map(|b| T::from_f64(b / sum)));
    }
    out
}

/// `dx = y ⊙ (g − Σ g⊙y)` per row.
fn softmax_grad_rows<T: WithDType>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(d).zip(g.chunks_exact(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        out.extend(
            yr.iter()
                .zip(gr)
                .map(|(a, b)| T::from_f64(a.to_f64() * (b.to_f64() - dot))),
        );
    }
    out
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = *l.shape().dims().last().unwrap_or(&1);
        let out = dispatch1!(s, l, "softmax", |x| softmax_rows(x, d));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2(&grad.contiguous()?, SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = *l1.shape().dims().last().unwrap_or(&1);
        let out = dispatch2!(s1, l1, s2, l2, "softmax-grad", |y, g| softmax_grad_rows(y, g, d));
        Ok((out, l1.shape().clone()))
    }
}

// ---------------------------------------------------------------------------
// Per-pixel normalization across channels of [N, C, H, W]

pub(crate) struct ChannelNorm {
    pub eps: f64,
}

struct ChannelNormGrad {
    eps: f64,
}

/// Per-pixel mean and reciprocal standard deviation of one sample.
fn pixel_stats<T: WithDType>(x: &[T], c: usize, hw: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0f64; hw];
    for ch in x.chunks_exact(hw).take(c) {
        for (m, v) in mean.iter_mut().zip(ch) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let mut var = vec![0f64; hw];
    for ch in x.chunks_exact(hw).take(c) {
        for ((s, v), m) in var.iter_mut().zip(ch).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    let rstd = var.iter().map(|s| 1.0 / (s / c as f64 + eps).sqrt()).collect();
    (mean, rstd)
}

fn channel_norm_fwd<T: WithDType>(x: &[T], (n, c, hw): (usize, usize, usize), eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for sample in x.chunks_exact(c * hw).take(n) {
        let (mean, rstd) = pixel_stats(sample, c, hw, eps);
        for ch in sample.chunks_exact(hw) {
            out.extend(
                ch.iter()
                    .zip(&mean)
                    .zip(&rstd)
                    .map(|((v, m), r)| T::from_f64((v.to_f64() - m) * r)),
            );
        }
    }
    out
}

/// `dx = rstd·(g − mean_c g − x̂·mean_c(g⊙x̂))`.
fn channel_norm_bwd<T: WithDType>(
    x: &[T],
    g: &[T],
    (n, c, hw): (usize, usize, usize),
    eps: f64,
) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (xs, gs) in x.chunks_exact(c * hw).zip(g.chunks_exact(c * hw)).take(n) {
        let (mean, rstd) = pixel_stats(xs, c, hw, eps);
        let mut mg = vec![0f64; hw];
        let mut mgx = vec![0f64; hw];
        for (xc, gc) in xs.chunks_exact(hw).zip(gs.chunks_exact(hw)) {
            for p in 0..hw {
                let xh = (xc[p].to_f64() - mean[p]) * rstd[p];
                let gv = gc[p].to_f64();
                mg[p] += gv;
                mgx[p] += gv * xh;
            }
        }
        for (xc, gc) in xs.chunks_exact(hw).zip(gs.chunks_exact(hw)) {
            for p in 0..hw {
                let xh = (xc[p].to_f64() - mean[p]) * rstd[p];
                let v = rstd[p] * (gc[p].to_f64() - mg[p] / c as f64 - xh * mgx[p] / c as f64);
                out.push(T::from_f64(v));
            }
        }
    }
    out
}

impl CustomOp1 for ChannelNorm {
    fn name(&self) -> &'static str {
        "channel-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = dispatch1!(s, l, "channel-norm", |x| channel_norm_fwd(x, (n, c, h * w), self.eps));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2(&grad.contiguous()?, ChannelNormGrad { eps: self.eps })?))
    }
}

impl CustomOp2 for ChannelNormGrad {
    fn name(&self) -> &'static str {
        "channel-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let out = dispatch2!(s1, l1, s2, l2, "channel-norm-grad", |x, g| channel_norm_bwd(
            x,
            g,
            (n, c, h * w),
            self.eps
        ));
        Ok((out, l1.shape().clone()))
    }
}
