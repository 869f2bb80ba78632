//! Training loop and dataset evaluation.
//!
//! Randomness of step `s` (augmentation seeds, initial-mask dropout) comes
//! from a ChaCha8 stream keyed by `(seed, s)`, and batch order from a seeded
//! per-epoch permutation, so a resumed run replays exactly the draws an
//! uninterrupted run would make.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{CheckpointBundle, RngAlgorithm, RngState};
use crate::config::{FseConfig, Stage, StageSet, TrainConfig};
use crate::error::{FseError, Result};
use crate::imaging::{augment, initial_mask, resize_image, AugmentSpec, ImageTensor, MaskTensor, SamplePair};
use crate::metrics::{composite_loss, mse, perceptual_distance, psnr_from_mse, ssim, MetricReport};
use crate::optim::{adamw_step, scheduled_lr, zero_grad, AdamHyper, AdamState};
use crate::params::NamedTensorMap;
use crate::perceptual::FeatureExtractor;
use crate::pipeline::{fse_forward, fse_infer, fse_init, FseOutput};

const EPOCH_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const BCE_CLAMP: f64 = 1e-6;

/// One line of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub ssim_term: f64,
    pub perc_term: f64,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {:e}, {:e}, {:e}, {:e}, {:e}",
            self.step, self.lr, self.total, self.mse, self.ssim_term, self.perc_term
        )
    }
}

impl LossRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || FseError::Format(format!("malformed loss record `{line}`"));
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(bad());
        }
        let num = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: parts[0].parse().map_err(|_| bad())?,
            lr: num(1)?,
            total: num(2)?,
            mse: num(3)?,
            ssim_term: num(4)?,
            perc_term: num(5)?,
        })
    }
}

/// Mean binary cross-entropy of `pred` against `target`, with `pred`
/// clamped away from 0 and 1.
pub fn binary_cross_entropy(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

fn check_finite(value: f64, step: usize, term: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(FseError::NonFiniteLoss {
            step,
            term: term.to_string(),
        })
    }
}

/// Stateful trainer; see [`train`] for the one-shot form.
pub struct Trainer<'a> {
    fse_config: FseConfig,
    config: TrainConfig,
    params: NamedTensorMap,
    optimizer: AdamState,
    step: usize,
    backend: &'a dyn FeatureExtractor,
    epoch_cache: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        fse_config: FseConfig,
        config: TrainConfig,
        backend: &'a dyn FeatureExtractor,
    ) -> Result<Self> {
        config.validate()?;
        let params = fse_init(&fse_config, config.seed)?;
        let optimizer = AdamState::new(&params)?;
        Ok(Self {
            fse_config,
            config,
            params,
            optimizer,
            step: 0,
            backend,
            epoch_cache: None,
        })
    }

    /// Continues from `bundle`; the stored configuration is authoritative.
    pub fn resume(bundle: CheckpointBundle, backend: &'a dyn FeatureExtractor) -> Result<Self> {
        bundle.train_config.validate()?;
        bundle.fse_config.validate()?;
        let rng_ok = bundle.rng.seed == bundle.train_config.seed
            && bundle.rng.next_step == bundle.step as u64
            && bundle.optimizer.step == bundle.step as u64;
        if !rng_ok {
            return Err(FseError::Checkpoint(format!(
                "inconsistent resume state: step {}, optimizer step {}, rng {:?}",
                bundle.step, bundle.optimizer.step, bundle.rng
            )));
        }
        for (name, _) in bundle.params.iter() {
            let (m, v) = crate::optim::moment_names(name);
            if !bundle.optimizer.moments.contains(&m) || !bundle.optimizer.moments.contains(&v) {
                return Err(FseError::Checkpoint(format!("missing optimizer moments for `{name}`")));
            }
        }
        Ok(Self {
            fse_config: bundle.fse_config,
            config: bundle.train_config,
            params: bundle.params,
            optimizer: bundle.optimizer,
            step: bundle.step,
            backend,
            epoch_cache: None,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn params(&self) -> &NamedTensorMap {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Overrides the step budget (the cosine schedule follows it).
    pub fn set_total_steps(&mut self, total: usize) -> Result<()> {
        if total < self.step {
            return Err(FseError::Config(format!(
                "total_steps {total} is below the completed step count {}",
                self.step
            )));
        }
        self.config.total_steps = total;
        self.config.validate()
    }

    pub fn checkpoint(&self) -> Result<CheckpointBundle> {
        Ok(CheckpointBundle {
            params: self.params.deep_clone()?,
            optimizer: self.optimizer.deep_clone()?,
            fse_config: self.fse_config.clone(),
            train_config: self.config.clone(),
            step: self.step,
            rng: self.rng_state(),
        })
    }

    pub fn into_checkpoint(self) -> CheckpointBundle {
        let rng = self.rng_state();
        CheckpointBundle {
            params: self.params,
            optimizer: self.optimizer,
            fse_config: self.fse_config,
            train_config: self.config,
            step: self.step,
            rng,
        }
    }

    fn rng_state(&self) -> RngState {
        RngState {
            algorithm: RngAlgorithm::Chacha8StepStreams,
            seed: self.config.seed,
            next_step: self.step as u64,
        }
    }

    fn sample_index(&mut self, k: usize, n: usize) -> usize {
        let epoch = k / n;
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ EPOCH_SALT);
            rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, perm));
        }
        self.epoch_cache.as_ref().unwrap().1[k % n]
    }

    /// Augmented batch and initial masks for the current step.
    fn batch(&mut self, dataset: &[SamplePair]) -> Result<(ImageTensor, ImageTensor, MaskTensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64);
        let (mut inputs, mut targets, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..self.config.batch_size {
            let idx = self.sample_index(self.step * self.config.batch_size + b, dataset.len());
            let spec = AugmentSpec {
                crop_size: self.config.crop_size,
                enable_hflip: self.config.enable_hflip,
                rotation_choices: self.config.rotation_choices.clone(),
                seed: rng.gen(),
            };
            let drop = rng.gen::<f64>() < self.config.init_mask_dropout;
            let pair = augment(&dataset[idx], &spec)?;
            let (s, _) = pair.size();
            let m = if drop {
                MaskTensor::zeros(1, s, s, DType::F32)?
            } else {
                initial_mask(&pair.shadow, &pair.target, self.config.mask_tau)?
            };
            inputs.push(pair.shadow);
            targets.push(pair.target);
            masks.push(m);
        }
        Ok((
            ImageTensor::stack(&inputs.iter().collect::<Vec<_>>())?,
            ImageTensor::stack(&targets.iter().collect::<Vec<_>>())?,
            MaskTensor::stack(&masks.iter().collect::<Vec<_>>())?,
        ))
    }

    fn trainable(&self, name: &str) -> bool {
        self.config.stages.iter().any(|s| name.starts_with(s.prefix()))
    }

    /// Runs one optimization step and returns its loss record.
    pub fn step(&mut self, dataset: &[SamplePair]) -> Result<LossRecord> {
        if dataset.is_empty() {
            return Err(FseError::Config("training dataset is empty".into()));
        }
        if self.is_done() {
            return Err(FseError::State(format!(
                "all {} steps already completed",
                self.config.total_steps
            )));
        }
        let cfg = &self.config;
        let lr = scheduled_lr(self.step, cfg.total_steps, cfg.warm_steps, cfg.lr_init, cfg.lr_min);
        let (input, target, init) = self.batch(dataset)?;
        let out = fse_forward(&self.params, &self.fse_config, &input, &init, &self.config.stages)?;
        let terms = composite_loss(&out.restored, &target, &self.config.loss_weights, self.backend)?;
        let (mut total_v, mse_v, ssim_v, perc_v) = terms.values()?;
        let step_no = self.step + 1;
        check_finite(mse_v, step_no, "mse")?;
        check_finite(ssim_v, step_no, "ssim")?;
        check_finite(perc_v, step_no, "perceptual")?;
        let mut total = terms.total;
        let aux_w = self.config.loss_weights.aux_mask_weight;
        if aux_w > 0.0 && self.config.stages.contains(&Stage::Mask) {
            let bce = binary_cross_entropy(out.mask.tensor(), init.tensor())?;
            check_finite(crate::ops::scalar_f64(&bce)?, step_no, "aux_mask")?;
            total = (total + bce.affine(aux_w, 0.0)?)?;
            total_v = crate::ops::scalar_f64(&total)?;
        }
        check_finite(total_v, step_no, "total")?;

        let grads = total.backward()?;
        let mut named = BTreeMap::new();
        for (name, var) in self.params.iter() {
            if !self.trainable(name) {
                continue;
            }
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => zero_grad(var.as_tensor())?,
            };
            named.insert(name.to_string(), g);
        }
        let hp = AdamHyper {
            lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            weight_decay: self.config.weight_decay,
            eps: self.config.eps,
        };
        adamw_step(&self.params, &named, &mut self.optimizer, &hp)?;
        self.step = step_no;
        Ok(LossRecord {
            step: step_no,
            lr,
            total: total_v,
            mse: mse_v,
            ssim_term: ssim_v,
            perc_term: perc_v,
        })
    }

    /// Steps until the budget is spent, calling `on_step` after each step.
    pub fn run<F>(&mut self, dataset: &[SamplePair], mut on_step: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&LossRecord, &Trainer<'a>) -> Result<()>,
    {
        let mut history = Vec::new();
        while !self.is_done() {
            let rec = self.step(dataset)?;
            on_step(&rec, self)?;
            history.push(rec);
        }
        Ok(history)
    }
}

/// Trains from scratch for `config.total_steps` steps.
pub fn train(
    dataset: &[SamplePair],
    fse_config: &FseConfig,
    config: &TrainConfig,
    backend: &dyn FeatureExtractor,
) -> Result<(CheckpointBundle, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(FseError::Config("training dataset is empty".into()));
    }
    let mut trainer = Trainer::new(fse_config.clone(), config.clone(), backend)?;
    let history = trainer.run(dataset, |_, _| Ok(()))?;
    Ok((trainer.into_checkpoint(), history))
}

/// Per-sample metrics averaged over `dataset` in order. Each pair is resized
/// to `resolution × resolution` when given, restored with a zero initial mask
/// and clamped; `visit` sees every pair and its outputs.
pub fn evaluate_with<F>(
    params: &NamedTensorMap,
    fse_config: &FseConfig,
    stages: &StageSet,
    dataset: &[SamplePair],
    resolution: Option<usize>,
    backend: &dyn FeatureExtractor,
    mut visit: F,
) -> Result<MetricReport>
where
    F: FnMut(&SamplePair, &FseOutput) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(FseError::Config("evaluation dataset is empty".into()));
    }
    if resolution == Some(0) {
        return Err(FseError::Config("resolution must be positive".into()));
    }
    let (mut s_psnr, mut s_ssim, mut s_mse, mut s_lp) = (0.0, 0.0, 0.0, 0.0);
    for pair in dataset {
        let (input, target) = match resolution {
            Some(r) => (resize_image(&pair.shadow, r, r)?, resize_image(&pair.target, r, r)?),
            None => (pair.shadow.clone(), pair.target.clone()),
        };
        let out = fse_infer(params, fse_config, &input, None, stages)?;
        let restored = out.restored.to_dtype(DType::F32)?;
        let m = mse(&restored, &target)?;
        s_mse += m;
        s_psnr += psnr_from_mse(m, 1.0);
        s_ssim += ssim(&restored, &target)?;
        s_lp += perceptual_distance(&restored, &target, backend)?;
        visit(pair, &out)?;
    }
    let n = dataset.len() as f64;
    Ok(MetricReport {
        psnr: s_psnr / n,
        ssim: s_ssim / n,
        mse: s_mse / n,
        lpips: Some(s_lp / n),
        proxy: backend.is_proxy(),
        n_samples: dataset.len(),
    })
}

pub fn evaluate(
    checkpoint: &CheckpointBundle,
    dataset: &[SamplePair],
    resolution: Option<usize>,
    backend: &dyn FeatureExtractor,
) -> Result<MetricReport> {
    evaluate_with(
        &checkpoint.params,
        &checkpoint.fse_config,
        &checkpoint.train_config.stages,
        dataset,
        resolution,
        backend,
        |_, _| Ok(()),
    )
}
