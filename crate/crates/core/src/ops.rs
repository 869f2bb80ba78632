//! Differentiable tensor primitives shared by every network stage.
//!
//! Convolutions are lowered to `im2col` + matrix multiplication so that the
//! expensive part of both the forward and backward pass runs through gemm,
//! and so that per-sample kernels (dynamic convolution) are an ordinary
//! batched matmul. `im2col` is a custom op whose gradient is `col2im`.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{FseError, Result};
use crate::kernels::{ChannelNorm, Softmax};

/// Unfolds `[N, C, H, W]` into `[N, C*k*k, H*W]` with "same" zero padding.
/// Row `c*k*k + ki*k + kj` holds channel `c` sampled at tap `(ki, kj)`.
#[derive(Debug, Clone, Copy)]
struct Im2Col {
    kernel: usize,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
struct Col2Im {
    kernel: usize,
    dilation: usize,
    channels: usize,
    height: usize,
    width: usize,
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im expects a contiguous tensor"),
    }
}

/// Source column range `[x0, x1)` for which `x + offset` stays in `[0, w)`.
fn valid_range(w: usize, offset: isize) -> (usize, usize) {
    let x0 = (-offset).max(0) as usize;
    let x1 = (w as isize - offset).clamp(0, w as isize) as usize;
    (x0.min(x1), x1)
}

fn im2col_impl<T: Copy + Default>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    dil: usize,
) -> Vec<T> {
    let hw = h * w;
    let kk = k * k;
    let half = (k / 2) as isize;
    let mut out = vec![T::default(); n * c * kk * hw];
    for b in 0..n {
        for ci in 0..c {
            let src = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            for ki in 0..k {
                let dy = (ki as isize - half) * dil as isize;
                for kj in 0..k {
                    let dx = (kj as isize - half) * dil as isize;
                    let row = (b * c * kk + ci * kk + ki * k + kj) * hw;
                    let dst = &mut out[row..row + hw];
                    let (x0, x1) = valid_range(w, dx);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let start = (sy * w as isize + dx + x0 as isize) as usize;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&src[start..start + (x1 - x0)]);
                    }
                }
            }
        }
    }
    out
}

fn col2im_impl<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    dil: usize,
) -> Vec<T> {
    let hw = h * w;
    let kk = k * k;
    let half = (k / 2) as isize;
    let mut out = vec![T::default(); n * c * hw];
    for b in 0..n {
        for ci in 0..c {
            let dst = &mut out[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            for ki in 0..k {
                let dy = (ki as isize - half) * dil as isize;
                for kj in 0..k {
                    let dx = (kj as isize - half) * dil as isize;
                    let row = (b * c * kk + ci * kk + ki * k + kj) * hw;
                    let src = &cols[row..row + hw];
                    let (x0, x1) = valid_range(w, dx);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let so = (sy as usize * w) as isize + dx;
                        for xx in x0..x1 {
                            dst[(so + xx as isize) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (n, c, h, w) = dims;
        let shape = Shape::from((n, c * self.kernel * self.kernel, h * w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(
                contiguous_slice(v, layout)?,
                dims,
                self.kernel,
                self.dilation,
            )),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(
                contiguous_slice(v, layout)?,
                dims,
                self.kernel,
                self.dilation,
            )),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            kernel: self.kernel,
            dilation: self.dilation,
            channels: c,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, rows, hw) = layout.shape().dims3()?;
        let kk = self.kernel * self.kernel;
        if rows != self.channels * kk || hw != self.height * self.width {
            candle_core::bail!("col2im: unexpected column shape {:?}", layout.shape());
        }
        let dims = (n, self.channels, self.height, self.width);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(
                contiguous_slice(v, layout)?,
                dims,
                self.kernel,
                self.dilation,
            )),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(
                contiguous_slice(v, layout)?,
                dims,
                self.kernel,
                self.dilation,
            )),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let op = Im2Col {
            kernel: self.kernel,
            dilation: self.dilation,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

/// `[N, C, H, W]` -> `[N, C*k*k, H*W]` columns with zero "same" padding.
pub fn im2col(x: &Tensor, kernel: usize, dilation: usize) -> Result<Tensor> {
    if kernel % 2 == 0 || dilation == 0 {
        return Err(FseError::Config(format!(
            "im2col needs an odd kernel and positive dilation (got k={kernel}, d={dilation})"
        )));
    }
    Ok(x.contiguous()?.apply_op1(Im2Col { kernel, dilation })?)
}

/// Standard convolution with stride 1 and "same" zero padding.
///
/// `weight` is `[Co, Ci, k, k]`, `bias` is `[Co]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, wci, k, k2) = weight.dims4()?;
    if wci != ci || k != k2 {
        return Err(FseError::Shape(format!(
            "conv2d: input has {ci} channels, kernel is {:?}",
            weight.dims()
        )));
    }
    let kernel = weight.reshape((co, ci * k * k))?;
    let out = if k == 1 {
        kernel.broadcast_matmul(&x.reshape((n, ci, h * w))?)?
    } else {
        kernel.broadcast_matmul(&im2col(x, k, dilation)?)?
    };
    let out = out.reshape((n, co, h, w))?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, co, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Convolution with a separate kernel per batch sample.
///
/// `kernels` is `[N, Co, Ci, k, k]`, `bias` (optional) is `[N, Co]`.
pub fn conv2d_per_sample(
    x: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (kn, co, kci, k, k2) = kernels.dims5()?;
    if kn != n || kci != ci || k != k2 {
        return Err(FseError::Shape(format!(
            "per-sample conv: input {:?}, kernels {:?}",
            x.dims(),
            kernels.dims()
        )));
    }
    let kmat = kernels.reshape((n, co, ci * k * k))?;
    let cols = if k == 1 {
        x.reshape((n, ci, h * w))?
    } else {
        im2col(x, k, dilation)?
    };
    let out = kmat.matmul(&cols)?.reshape((n, co, h, w))?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((n, co, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Depthwise 3×3 (or k×k) convolution; `weight` is `[C, 1, k, k]`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, one, k, _) = weight.dims4()?;
    if wc != c || one != 1 {
        return Err(FseError::Shape(format!(
            "depthwise conv: input has {c} channels, kernel is {:?}",
            weight.dims()
        )));
    }
    let cols = im2col(x, k, 1)?.reshape((n, c, k * k, h * w))?;
    let kernel = weight.reshape((1, c, 1, k * k))?;
    let out = kernel.broadcast_matmul(&cols)?.reshape((n, c, h, w))?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, c, 1, 1))?)?),
        None => Ok(out),
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()?.affine(1.0 - LEAKY_SLOPE, 0.0)? + x.affine(LEAKY_SLOPE, 0.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dimension (max-shifted, accumulated in `f64`).
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

/// Normalizes over the channel axis of `[N, C, H, W]` (per pixel), then
/// applies a per-channel affine map.
pub fn channel_layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    let normed = x.contiguous()?.apply_op1(ChannelNorm { eps })?;
    Ok(normed
        .broadcast_mul(&gain.reshape((1, c, 1, 1))?)?
        .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
}

/// Reflect-pads the bottom/right edges of `[N, C, H, W]` (no edge repeat).
pub fn reflect_pad_bottom_right(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if pad_h >= h.max(2) || pad_w >= w.max(2) || (pad_h > 0 && h < 2) || (pad_w > 0 && w < 2) {
        return Err(FseError::Config(format!(
            "reflect padding ({pad_h}, {pad_w}) too large for {h}x{w}"
        )));
    }
    let reflect_index = |len: usize, pad: usize| -> Vec<u32> {
        (0..len + pad)
            .map(|i| if i < len { i } else { 2 * (len - 1) - i } as u32)
            .collect()
    };
    let mut out = x.clone();
    if pad_h > 0 {
        let idx = Tensor::new(reflect_index(h, pad_h), x.device())?;
        out = out.index_select(&idx, 2)?;
    }
    if pad_w > 0 {
        let idx = Tensor::new(reflect_index(w, pad_w), x.device())?;
        out = out.index_select(&idx, 3)?;
    }
    Ok(out)
}

/// Reads a scalar tensor of any float dtype as `f64`.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattens a tensor of any float dtype into `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let sum = scalar_f64(&t.abs()?.sum_all()?)?;
    if sum.is_finite() {
        Ok(())
    } else {
        Err(FseError::Numeric(format!("{what} contains non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        co: usize,
        k: usize,
        dil: usize,
    ) -> Vec<f64> {
        let half = (k / 2) as isize;
        let mut out = vec![0.0; n * co * h * w];
        for b in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let sy = y as isize + (ki as isize - half) * dil as isize;
                                    let sx = xx as isize + (kj as isize - half) * dil as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * ci + c) * h + sy as usize) * w + sx as usize]
                                        * wt[((o * ci + c) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * co + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let dev = Device::Cpu;
        for &(dil, h, w) in &[(1, 5, 7), (2, 6, 6), (4, 5, 9)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, h, w), &dev).unwrap();
            let wt = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
            let got = to_f64_vec(&conv2d(&x, &wt, None, dil).unwrap()).unwrap();
            let want = naive_conv(
                &to_f64_vec(&x).unwrap(),
                (2, 3, h, w),
                &to_f64_vec(&wt).unwrap(),
                4,
                3,
                dil,
            );
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> via autograd of a linear functional.
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 5, 6), &dev).unwrap()).unwrap();
        let y = Tensor::randn(0f64, 1.0, (1, 18, 30), &dev).unwrap();
        let cols = im2col(x.as_tensor(), 3, 2).unwrap();
        let f = (cols * &y).unwrap().sum_all().unwrap();
        let grads = f.backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap();
        let lhs = scalar_f64(&f).unwrap();
        let rhs = scalar_f64(&(x.as_tensor() * g).unwrap().sum_all().unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 5.0, (3, 7), &dev).unwrap();
        let p = softmax_last_dim(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in p {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f64, 4.0, &dev).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let p = reflect_pad_bottom_right(&x, 0, 2).unwrap();
        assert_eq!(to_f64_vec(&p).unwrap(), vec![0.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert!(reflect_pad_bottom_right(&x, 0, 4).is_err());
    }

    #[test]
    fn leaky_relu_and_sigmoid_values() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-1.0f64, 0.0, 2.0], &dev).unwrap();
        let l = leaky_relu(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((l[0] + 0.2).abs() < 1e-15 && l[1] == 0.0 && (l[2] - 2.0).abs() < 1e-15);
        let s = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s[1], 0.5);
    }
}
