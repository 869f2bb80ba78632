//! Metrics and the composite loss against direct-loop oracles.

mod common;

use candle_core::{DType, Tensor};
use common::*;
use fse_core::imaging::ImageTensor;
use fse_core::metrics::*;
use fse_core::ops::conv2d;
use fse_core::perceptual::{perceptual_distance_tensor, unit_normalize, ConvStackBackend, FeatureExtractor};

fn img64(seed: u64, n: usize, h: usize, w: usize) -> ImageTensor {
    rand_image(seed, n, h, w, DType::F64)
}

fn f(t: &ImageTensor) -> Vec<f64> {
    t.to_f64_vec().unwrap()
}

fn constant(v: f64, n: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::full(v, (n, 3, h, w), &candle_core::Device::Cpu).unwrap()).unwrap()
}

#[test]
fn twenty_pairs_match_oracles() {
    for seed in 0..20u64 {
        let a = img64(seed, 1, 16, 16);
        let b = img64(seed + 1000, 1, 16, 16);
        let m = mse(&a, &b).unwrap();
        let m_ref = mse_oracle(&f(&a), &f(&b));
        assert!((m - m_ref).abs() <= 1e-9, "seed {seed}: mse {m} vs {m_ref}");
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * (1.0 / m_ref).log10()).abs() <= 1e-9);
        let s = ssim(&a, &b).unwrap();
        let s_ref = ssim_oracle(&f(&a), &f(&b), (1, 3, 16, 16));
        assert!((s - s_ref).abs() <= 1e-5, "seed {seed}: ssim {s} vs {s_ref}");
    }
}

#[test]
fn ssim_closed_forms() {
    let x = img64(3, 2, 16, 20);
    assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    let c1: f64 = 0.01f64.powi(2);
    let s = ssim(&constant(0.0, 1, 16, 16), &constant(1.0, 1, 16, 16)).unwrap();
    assert!((s - c1 / (1.0 + c1)).abs() <= 1e-7);
    assert!(matches!(ssim(&constant(0.0, 1, 10, 16), &constant(0.0, 1, 10, 16)), Err(fse_core::FseError::Config(_))));
}

#[test]
fn metrics_are_symmetric() {
    let backend = ConvStackBackend::fallback();
    for seed in 0..5u64 {
        let a = img64(seed, 1, 16, 16);
        let b = img64(seed + 7, 1, 16, 16);
        assert!((mse(&a, &b).unwrap() - mse(&b, &a).unwrap()).abs() <= 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        let d1 = perceptual_distance(&a, &b, &backend).unwrap();
        let d2 = perceptual_distance(&b, &a, &backend).unwrap();
        assert!((d1 - d2).abs() <= 1e-9);
    }
}

/// Reorders the batch of both images by the same permutation.
fn permute(x: &ImageTensor, order: &[usize]) -> ImageTensor {
    let parts: Vec<Tensor> = order.iter().map(|&i| x.tensor().narrow(0, i, 1).unwrap()).collect();
    ImageTensor::new(Tensor::cat(&parts, 0).unwrap()).unwrap()
}

#[test]
fn batch_permutation_invariance() {
    let backend = ConvStackBackend::fallback();
    let a = img64(1, 4, 16, 16);
    let b = img64(2, 4, 16, 16);
    let order = [2, 0, 3, 1];
    let (pa, pb) = (permute(&a, &order), permute(&b, &order));
    assert!((mse(&a, &b).unwrap() - mse(&pa, &pb).unwrap()).abs() <= 1e-12);
    assert!((ssim(&a, &b).unwrap() - ssim(&pa, &pb).unwrap()).abs() <= 1e-12);
    let d = perceptual_distance(&a, &b, &backend).unwrap();
    assert!((d - perceptual_distance(&pa, &pb, &backend).unwrap()).abs() <= 1e-12);
}

#[test]
fn psnr_consistent_with_mse_over_range() {
    for k in 0..=16 {
        let m = 10f64.powf(-8.0 + 0.5 * k as f64);
        assert!((psnr_from_mse(m, 1.0) - 10.0 * (1.0 / m).log10()).abs() <= 1e-9);
    }
    assert_eq!(psnr_from_mse(0.0, 1.0), PSNR_CAP_DB);
}

/// Layer by layer: rescale to `[-1, 1]`, direct-loop conv, tanh, then the
/// per-pixel unit normalization and mean squared difference.
#[test]
fn perceptual_distance_layerwise_recomputation() {
    let backend = ConvStackBackend::fallback();
    let (n, h, w) = (2, 12, 12);
    let a = img64(4, n, h, w);
    let b = img64(5, n, h, w);
    let forward = |x: &[f64]| {
        let mut cur: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let mut ci = 3;
        let mut feats = Vec::new();
        for i in 0..backend.num_layers() {
            let (wt, bs, d) = backend.layer(i);
            let co = wt.dims()[0];
            let k = wt.dims()[2];
            cur = naive_conv2d(&cur, (n, ci, h, w), &values(wt), (co, k), Some(&values(bs)), d)
                .into_iter()
                .map(f64::tanh)
                .collect();
            ci = co;
            feats.push((cur.clone(), co));
        }
        feats
    };
    let fa = forward(&f(&a));
    let fb = forward(&f(&b));
    let hw = h * w;
    let mut expect = 0.0;
    let got_a = backend.features(a.tensor()).unwrap();
    for (li, ((xa, c), (xb, _))) in fa.iter().zip(&fb).enumerate() {
        assert!(values(&got_a[li]).iter().zip(xa).all(|(g, e)| (g - e).abs() <= 1e-6));
        let mut acc = 0.0;
        for s in 0..n {
            for p in 0..hw {
                let at = |x: &Vec<f64>, ch: usize| x[(s * c + ch) * hw + p];
                let na = ((0..*c).map(|ch| at(xa, ch).powi(2)).sum::<f64>() + 1e-10).sqrt();
                let nb = ((0..*c).map(|ch| at(xb, ch).powi(2)).sum::<f64>() + 1e-10).sqrt();
                for ch in 0..*c {
                    acc += (at(xa, ch) / na - at(xb, ch) / nb).powi(2);
                }
            }
        }
        expect += acc / (n * c * hw) as f64;
    }
    let got = perceptual_distance(&a, &b, &backend).unwrap();
    assert!((got - expect).abs() <= 1e-6, "{got} vs {expect}");
}

#[test]
fn unit_normalize_gives_unit_vectors() {
    let x = rand_tensor(3, &[2, 5, 4, 4], -1.0, 1.0, DType::F64);
    let u = unit_normalize(&x).unwrap();
    let norms = values(&u.sqr().unwrap().sum_keepdim(1).unwrap());
    assert!(norms.iter().all(|v| (v - 1.0).abs() < 1e-8));
}

#[test]
fn composite_matches_hand_arithmetic() {
    let backend = ConvStackBackend::fallback();
    let p = img64(10, 2, 16, 16);
    let t = img64(11, 2, 16, 16);
    let weights = LossWeights {
        lambda1: 0.3,
        lambda2: 0.7,
        aux_mask_weight: 0.0,
    };
    let terms = composite_loss(&p, &t, &weights, &backend).unwrap();
    let (total, m, s, perc) = terms.values().unwrap();
    let m_ref = mse(&p, &t).unwrap();
    let s_ref = 1.0 - ssim(&p, &t).unwrap();
    let d_ref = perceptual_distance_tensor(p.tensor(), t.tensor(), &backend)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!((m - m_ref).abs() <= 1e-9);
    assert!((s - s_ref).abs() <= 1e-9);
    assert!((perc - d_ref).abs() <= 1e-9);
    assert!((total - (m_ref + 0.3 * s_ref + 0.7 * d_ref)).abs() <= 1e-9);

    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        aux_mask_weight: 0.0,
    };
    let (total, m, _, _) = composite_loss(&p, &t, &zero, &backend).unwrap().values().unwrap();
    assert_eq!(total.to_bits(), m.to_bits());
    let negative = LossWeights { lambda1: -1.0, ..zero };
    assert!(composite_loss(&p, &t, &negative, &backend).is_err());
}

#[test]
fn conv_helper_agrees_with_oracle() {
    let x = rand_tensor(1, &[1, 2, 7, 6], -1.0, 1.0, DType::F64);
    let wt = rand_tensor(2, &[3, 2, 3, 3], -1.0, 1.0, DType::F64);
    let bs = rand_tensor(3, &[3], -1.0, 1.0, DType::F64);
    let got = values(&conv2d(&x, &wt, Some(&bs), 2).unwrap());
    let expect = naive_conv2d(&values(&x), (1, 2, 7, 6), &values(&wt), (3, 3), Some(&values(&bs)), 2);
    assert!(got.iter().zip(&expect).all(|(g, e)| (g - e).abs() < 1e-12));
}

#[test]
fn report_text_roundtrip_and_table() {
    let r = MetricReport {
        psnr: 31.25,
        ssim: 0.9512,
        mse: 7.5e-4,
        lpips: Some(0.0421),
        proxy: true,
        n_samples: 10,
    };
    let text = r.to_text();
    assert!(text.contains("lpips_proxy="));
    assert_eq!(MetricReport::from_text(&text).unwrap(), r);
    let plain = MetricReport {
        lpips: None,
        proxy: false,
        ..r.clone()
    };
    assert_eq!(MetricReport::from_text(&plain.to_text()).unwrap(), plain);
    assert!(MetricReport::from_text("psnr_db=1\nbogus=2\n").is_err());

    let table = render_table(&[
        ("fse".into(), "synthetic".into(), r.clone()),
        ("identity".into(), "synthetic".into(), plain),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    let widths: Vec<usize> = lines[..4].iter().map(|l| l.len()).collect();
    assert!(widths.windows(2).all(|w| w[0] == w[1]), "{table}");
    assert!(lines[2].contains("0.042*"));
    assert!(lines[4].starts_with('*'));
}
