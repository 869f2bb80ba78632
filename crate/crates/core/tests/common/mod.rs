//! Helpers shared by the integration tests: tiny configurations, seeded
//! inputs, a finite-difference gradient checker and brute-force oracles.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use fse_core::config::FseConfig;
use fse_core::imaging::{ImageTensor, MaskTensor};
use fse_core::params::NamedTensorMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
/// Absolute agreement accepted for gradients that are numerically zero.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Smallest configuration that still exercises every structural feature:
/// two aggregation blocks (one with a dilated branch), regular and shifted
/// windows, and a window clamped to the map at the second scale.
pub fn tiny_config() -> FseConfig {
    let mut c = FseConfig::desk();
    c.mask.base_channels = 8;
    c.mask.num_extract_blocks = 1;
    c.mask.num_residual_blocks = 1;
    c.coarse.base_channels = 8;
    c.coarse.num_agg_blocks = 2;
    c.coarse.dilation_rates = vec![1, 2];
    c.coarse.num_experts = 2;
    c.refine.embed_dim = 8;
    c.refine.num_heads = 2;
    c.refine.window_size = 4;
    c.refine.num_scales = 2;
    c.refine.irc_hidden = 4;
    c
}

pub fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64, dtype: DType) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(uniform(seed, n, lo, hi), shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn rand_image(seed: u64, n: usize, h: usize, w: usize, dtype: DType) -> ImageTensor {
    ImageTensor::new(rand_tensor(seed, &[n, 3, h, w], 0.0, 1.0, dtype)).unwrap()
}

pub fn rand_mask(seed: u64, n: usize, h: usize, w: usize, dtype: DType) -> MaskTensor {
    MaskTensor::new(rand_tensor(seed, &[n, 1, h, w], 0.0, 1.0, dtype)).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    values(t).into_iter().map(f64::to_bits).collect()
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`, so that
/// no path starts at an exact zero (identity initializations would otherwise
/// make many gradients vanish trivially).
pub fn randomize(params: &NamedTensorMap, seed: u64, scale: f64) {
    for (i, (name, var)) in params.iter().enumerate() {
        let t = rand_tensor(seed.wrapping_add(i as u64 * 7919), var.dims(), -scale, scale, var.dtype());
        params.set(name, &t).unwrap();
    }
}

/// Fixed random linear functional `Σ out ⊙ r`, so every output element
/// contributes with a distinct weight.
pub fn probe(out: &Tensor, seed: u64) -> Tensor {
    let r = rand_tensor(seed, out.dims(), -1.0, 1.0, out.dtype());
    (out * r).unwrap().sum_all().unwrap()
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: Vec<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }

    /// Pools another check's counts and mismatches into this one.
    pub fn absorb(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.worst.extend(other.worst);
    }
}

fn agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_REL_TOL * analytic.abs().max(numeric.abs()) || diff <= FD_ABS_FLOOR
}

/// Compares backprop gradients of `loss()` with central differences at
/// `n_coords` coordinates: one in every tensor, the rest uniformly over tensors.
pub fn grad_check<F>(params: &NamedTensorMap, n_coords: usize, seed: u64, loss: F) -> GradCheck
where
    F: Fn() -> Tensor,
{
    grad_check_step(params, n_coords, seed, FD_STEP, loss)
}

/// [`grad_check`] with an explicit finite-difference step.
pub fn grad_check_step<F>(
    params: &NamedTensorMap,
    n_coords: usize,
    seed: u64,
    step: f64,
    loss: F,
) -> GradCheck
where
    F: Fn() -> Tensor,
{
    let l = loss();
    let grads = l.backward().unwrap();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = params.get(name).unwrap().elem_count();
        coords.push((i, rng.gen_range(0..n)));
    }
    while coords.len() < n_coords {
        let i = rng.gen_range(0..names.len());
        let n = params.get(&names[i]).unwrap().elem_count();
        coords.push((i, rng.gen_range(0..n)));
    }
    let mut result = GradCheck {
        checked: 0,
        passed: 0,
        worst: Vec::new(),
    };
    for (i, idx) in coords {
        let name = &names[i];
        let var = params.var(name).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g)[idx],
            None => 0.0,
        };
        let orig = values(var.as_tensor());
        let shape = var.dims().to_vec();
        let eval = |delta: f64| {
            let mut v = orig.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        var.set(&Tensor::from_vec(orig, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        result.checked += 1;
        if agrees(analytic, numeric) {
            result.passed += 1;
        } else {
            result.worst.push((name.clone(), idx, analytic, numeric));
        }
    }
    result
}

/// Central-difference check of `d loss / d x` for an input tensor.
pub fn input_grad_check<F>(x: &candle_core::Var, n_coords: usize, seed: u64, loss: F) -> GradCheck
where
    F: Fn(&Tensor) -> Tensor,
{
    input_grad_check_step(x, n_coords, seed, FD_STEP, loss)
}

pub fn input_grad_check_step<F>(
    x: &candle_core::Var,
    n_coords: usize,
    seed: u64,
    step: f64,
    loss: F,
) -> GradCheck
where
    F: Fn(&Tensor) -> Tensor,
{
    let mut map = NamedTensorMap::new();
    map.insert("input", x.as_tensor().clone()).unwrap();
    let var = map.var("input").unwrap().clone();
    grad_check_step(&map, n_coords, seed, step, || loss(var.as_tensor()))
}

// ---------------------------------------------------------------------------
// Oracles

/// Direct 2-D convolution with zero "same" padding, `[N,Ci,H,W]` x `[Co,Ci,k,k]`.
pub fn naive_conv2d(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (co, k): (usize, usize),
    bias: Option<&[f64]>,
    dil: usize,
) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let sy = y as isize + (ki as isize - half) * dil as isize;
                                let sx = xx as isize + (kj as isize - half) * dil as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + sy as usize) * w + sx as usize];
                                let wv = weight[((o * ci + c) * k + ki) * k + kj];
                                acc += xv * wv;
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

pub fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s / a.len() as f64
}

fn gauss11() -> [[f64; 11]; 11] {
    let mut g1 = [0.0; 11];
    let mut s = 0.0;
    for (i, g) in g1.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *g = (-d * d / (2.0 * 1.5 * 1.5)).exp();
        s += *g;
    }
    let mut g = [[0.0; 11]; 11];
    for i in 0..11 {
        for j in 0..11 {
            g[i][j] = g1[i] * g1[j] / (s * s);
        }
    }
    g
}

/// Sliding-window SSIM: for every valid 11×11 window of every channel and
/// sample, weighted local statistics and the SSIM formula; the mean of all.
pub fn ssim_oracle(a: &[f64], b: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> f64 {
    let g = gauss11();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = base + (y + i) * w + x + j;
                        let (va, vb) = (a[p], b[p]);
                        ma += g[i][j] * va;
                        mb += g[i][j] * vb;
                        saa += g[i][j] * va * va;
                        sbb += g[i][j] * vb * vb;
                        sab += g[i][j] * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}
