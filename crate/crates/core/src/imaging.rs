//! Image I/O, tensor newtypes, paired datasets, augmentation and the
//! thresholded initial shadow mask.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FseError, Result};
use crate::ops;

/// Default luminance-difference threshold for the initial mask (~13/255).
pub const DEFAULT_MASK_TAU: f64 = 0.05;

const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// `[N, C, H, W]` image batch with `C ∈ {1, 3}` and finite values.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

/// `[N, 1, H, W]` map with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MaskTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 4 {
            return Err(FseError::Shape(format!("image must be rank 4, got {dims:?}")));
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        if n == 0 || h == 0 || w == 0 || !(c == 1 || c == 3) {
            return Err(FseError::Shape(format!(
                "image must be [N>=1, C in {{1,3}}, H>=1, W>=1], got {dims:?}"
            )));
        }
        ops::ensure_finite(&t, "image")?;
        Ok(Self(t))
    }

    pub fn from_vec(data: Vec<f32>, shape: (usize, usize, usize, usize)) -> Result<Self> {
        Self::new(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    /// Wraps a network output; shape is guaranteed by construction and
    /// finiteness is checked at the loss.
    pub(crate) fn from_model(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        ops::to_f64_vec(&self.0)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        if self.0.dtype() == dtype {
            return Ok(self.clone());
        }
        Ok(Self(self.0.to_dtype(dtype)?))
    }

    /// Values clamped to `[0, 1]`.
    pub fn clamped(&self) -> Result<Self> {
        Ok(Self(self.0.clamp(0.0, 1.0)?))
    }

    /// Sample `i` of the batch as an `N = 1` image.
    pub fn sample(&self, i: usize) -> Result<Self> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }

    /// Concatenates equally-shaped images along the batch axis.
    pub fn stack(items: &[&ImageTensor]) -> Result<Self> {
        let ts: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        Self::new(Tensor::cat(&ts, 0)?)
    }
}

impl MaskTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[0] == 0 {
            return Err(FseError::Shape(format!("mask must be [N, 1, H, W], got {dims:?}")));
        }
        let v = ops::to_f64_vec(&t)?;
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(FseError::Numeric("mask values must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    /// Wraps a tensor already known to be in `[0, 1]` (e.g. a sigmoid output).
    pub(crate) fn from_trusted(t: Tensor) -> Self {
        Self(t)
    }

    pub fn zeros(n: usize, h: usize, w: usize, dtype: DType) -> Result<Self> {
        Ok(Self(Tensor::zeros((n, 1, h, w), dtype, &Device::Cpu)?))
    }

    pub fn from_vec(data: Vec<f32>, shape: (usize, usize, usize)) -> Result<Self> {
        let (n, h, w) = shape;
        Self::new(Tensor::from_vec(data, (n, 1, h, w), &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self(self.0.to_dtype(dtype)?))
    }

    pub fn sample(&self, i: usize) -> Result<Self> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }

    pub fn stack(items: &[&MaskTensor]) -> Result<Self> {
        let ts: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        Ok(Self(Tensor::cat(&ts, 0)?))
    }
}

/// One aligned (shadow, shadow-free, optional mask) record.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub shadow: ImageTensor,
    pub target: ImageTensor,
    pub mask: Option<MaskTensor>,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        shadow: ImageTensor,
        target: ImageTensor,
        mask: Option<MaskTensor>,
    ) -> Result<Self> {
        let id = id.into();
        let (sn, sc, sh, sw) = shadow.dims();
        let (tn, tc, th, tw) = target.dims();
        if sn != 1 || tn != 1 {
            return Err(FseError::Shape(format!("pair `{id}`: images must have N = 1")));
        }
        if (sc, sh, sw) != (tc, th, tw) {
            return Err(FseError::Shape(format!(
                "pair `{id}`: shadow is {sc}x{sh}x{sw}, target is {tc}x{th}x{tw}"
            )));
        }
        if let Some(m) = &mask {
            let (mn, _, mh, mw) = m.dims();
            if mn != 1 || (mh, mw) != (sh, sw) {
                return Err(FseError::Shape(format!(
                    "pair `{id}`: mask is {mh}x{mw}, images are {sh}x{sw}"
                )));
            }
        }
        Ok(Self {
            id,
            shadow,
            target,
            mask,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.shadow.dims();
        (h, w)
    }
}

// ---------------------------------------------------------------------------
// File I/O

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| FseError::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| FseError::Format(format!("{}: {e}", path.display())))?;
    image_to_tensor(&img, path)
}

fn image_to_tensor(img: &DynamicImage, path: &Path) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => (
            1,
            img.to_luma8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        ),
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => (
            3,
            img.to_rgb8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        ),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => (
            1,
            img.to_luma16().into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => (
            3,
            img.to_rgb16().into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        other => {
            return Err(FseError::Format(format!(
                "{}: unsupported pixel format {:?} (8- or 16-bit integer required)",
                path.display(),
                other.color()
            )))
        }
    };
    // interleaved HWC -> planar CHW
    let mut planar = vec![0f32; data.len()];
    for (i, px) in data.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * h * w + i] = v;
        }
    }
    ImageTensor::from_vec(planar, (1, channels, h, w))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `N = 1` image (or mask, `C = 1`) after clamping to `[0, 1]`.
pub fn save_image(t: &ImageTensor, path: &Path) -> Result<()> {
    let (n, c, h, w) = t.dims();
    if n != 1 {
        return Err(FseError::Shape(format!("save_image expects N = 1, got {n}")));
    }
    save_planar(&t.to_vec()?, c, h, w, path)
}

pub fn save_mask(m: &MaskTensor, path: &Path) -> Result<()> {
    let (n, _, h, w) = m.dims();
    if n != 1 {
        return Err(FseError::Shape(format!("save_mask expects N = 1, got {n}")));
    }
    save_planar(&m.to_vec()?, 1, h, w, path)
}

fn save_planar(planar: &[f32], c: usize, h: usize, w: usize, path: &Path) -> Result<()> {
    let mut inter = vec![0u8; planar.len()];
    for ch in 0..c {
        for i in 0..h * w {
            inter[i * c + ch] = quantize(planar[ch * h * w + i]);
        }
    }
    let img = if c == 1 {
        DynamicImage::ImageLuma8(
            ImageBuffer::from_raw(w as u32, h as u32, inter)
                .ok_or_else(|| FseError::Shape("buffer size mismatch".into()))?,
        )
    } else {
        DynamicImage::ImageRgb8(
            ImageBuffer::from_raw(w as u32, h as u32, inter)
                .ok_or_else(|| FseError::Shape("buffer size mismatch".into()))?,
        )
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| FseError::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => FseError::io(path, io),
        other => FseError::Format(format!("{}: {other}", path.display())),
    })
}

pub fn load_mask(path: &Path) -> Result<MaskTensor> {
    let img = load_image(path)?;
    let t = if img.dims().1 == 3 {
        rgb_to_luminance(&img)?.into_tensor()
    } else {
        img.into_tensor()
    };
    MaskTensor::new(t.clamp(0.0, 1.0)?)
}

/// Bilinear resize of every channel to `h × w`; identity when sizes match.
pub fn resize_image(t: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    let (n, c, sh, sw) = t.dims();
    if (sh, sw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.to_vec()?;
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in src.chunks_exact(sh * sw) {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(sw as u32, sh as u32, plane.to_vec())
                .ok_or_else(|| FseError::Shape("buffer size mismatch".into()))?;
        let resized = image::imageops::resize(
            &buf,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        );
        out.extend(resized.into_raw());
    }
    ImageTensor::from_vec(out, (n, c, h, w))
}

pub fn resize_mask(m: &MaskTensor, h: usize, w: usize) -> Result<MaskTensor> {
    let (n, _, mh, mw) = m.dims();
    if (mh, mw) == (h, w) {
        return Ok(m.clone());
    }
    let as_img = ImageTensor::new(m.tensor().clone())?;
    let r = resize_image(&as_img, h, w)?;
    debug_assert_eq!(r.dims().0, n);
    MaskTensor::new(r.into_tensor().clamp(0.0, 1.0)?)
}

// ---------------------------------------------------------------------------
// Luminance and the initial mask

pub fn rgb_to_luminance(t: &ImageTensor) -> Result<ImageTensor> {
    let (_, c, _, _) = t.dims();
    if c != 3 {
        return Err(FseError::Shape(format!("luminance needs 3 channels, got {c}")));
    }
    let x = t.tensor();
    let y = ((x.narrow(1, 0, 1)? * LUMA_WEIGHTS[0])?
        + (x.narrow(1, 1, 1)? * LUMA_WEIGHTS[1])?)?
        .add(&(x.narrow(1, 2, 1)? * LUMA_WEIGHTS[2])?)?;
    ImageTensor::new(y)
}

fn luminance_any(t: &ImageTensor) -> Result<Tensor> {
    if t.dims().1 == 3 {
        Ok(rgb_to_luminance(t)?.into_tensor())
    } else {
        Ok(t.tensor().clone())
    }
}

/// Binary mask: 1 where the luminance difference exceeds `tau`.
pub fn initial_mask(input: &ImageTensor, target: &ImageTensor, tau: f64) -> Result<MaskTensor> {
    if input.dims() != target.dims() {
        return Err(FseError::Shape(format!(
            "initial_mask: input {:?} vs target {:?}",
            input.dims(),
            target.dims()
        )));
    }
    if !(tau >= 0.0) {
        return Err(FseError::Config(format!("threshold must be >= 0, got {tau}")));
    }
    let dtype = input.tensor().dtype();
    let diff = (luminance_any(target)? - luminance_any(input)?)?.abs()?;
    let mask = diff.gt(tau)?.to_dtype(dtype)?;
    Ok(MaskTensor::from_trusted(mask))
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop_size: usize,
    pub enable_hflip: bool,
    pub rotation_choices: Vec<Rotation>,
    pub seed: u64,
}

/// A concrete square crop followed by an optional horizontal flip and a
/// counter-clockwise right-angle rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricTransform {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub hflip: bool,
    pub rotation: Rotation,
}

impl AugmentSpec {
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_size,
            enable_hflip: false,
            rotation_choices: vec![Rotation::R0],
            seed: 0,
        }
    }

    /// Draws the transform for an `h × w` sample from this spec's seed.
    pub fn sample_transform(&self, h: usize, w: usize) -> Result<GeometricTransform> {
        if self.crop_size == 0 || self.crop_size > h.min(w) {
            return Err(FseError::Config(format!(
                "crop size {} does not fit a {h}x{w} sample",
                self.crop_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let top = rng.gen_range(0..=h - self.crop_size);
        let left = rng.gen_range(0..=w - self.crop_size);
        let hflip = self.enable_hflip && rng.gen_bool(0.5);
        let rotation = if self.rotation_choices.is_empty() {
            Rotation::R0
        } else {
            self.rotation_choices[rng.gen_range(0..self.rotation_choices.len())]
        };
        Ok(GeometricTransform {
            top,
            left,
            size: self.crop_size,
            hflip,
            rotation,
        })
    }
}

impl GeometricTransform {
    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.size == 0 || self.top + self.size > h || self.left + self.size > w {
            return Err(FseError::Config(format!(
                "crop {}+{}x{}+{} exceeds {h}x{w}",
                self.top, self.size, self.left, self.size
            )));
        }
        Ok(())
    }

    fn apply_plane(&self, src: &[f32], w: usize, dst: &mut Vec<f32>) {
        let s = self.size;
        let turns = self.rotation.quarter_turns();
        for y in 0..s {
            for x in 0..s {
                // inverse-map output (y, x) through the rotation, then the flip
                let (ry, rx) = match turns {
                    0 => (y, x),
                    1 => (x, s - 1 - y),
                    2 => (s - 1 - y, s - 1 - x),
                    _ => (s - 1 - x, y),
                };
                let fx = if self.hflip { s - 1 - rx } else { rx };
                dst.push(src[(self.top + ry) * w + self.left + fx]);
            }
        }
    }

    fn apply_raw(&self, data: &[f32], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f32> {
        let mut out = Vec::with_capacity(n * c * self.size * self.size);
        for plane in data.chunks_exact(h * w) {
            self.apply_plane(plane, w, &mut out);
        }
        out
    }

    pub fn apply_image(&self, t: &ImageTensor) -> Result<ImageTensor> {
        let dims = t.dims();
        self.check(dims.2, dims.3)?;
        let out = self.apply_raw(&t.to_vec()?, dims);
        ImageTensor::from_vec(out, (dims.0, dims.1, self.size, self.size))
    }

    pub fn apply_mask(&self, m: &MaskTensor) -> Result<MaskTensor> {
        let dims = m.dims();
        self.check(dims.2, dims.3)?;
        let out = self.apply_raw(&m.to_vec()?, dims);
        MaskTensor::from_vec(out, (dims.0, self.size, self.size))
    }
}

/// Applies one seeded geometric transform identically to every member of the pair.
pub fn augment(pair: &SamplePair, spec: &AugmentSpec) -> Result<SamplePair> {
    let (h, w) = pair.size();
    let tf = spec.sample_transform(h, w)?;
    SamplePair::new(
        pair.id.clone(),
        tf.apply_image(&pair.shadow)?,
        tf.apply_image(&pair.target)?,
        pair.mask.as_ref().map(|m| tf.apply_mask(m)).transpose()?,
    )
}

// ---------------------------------------------------------------------------
// Paired datasets

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FseError::io(dir, e))? {
        let path = entry.map_err(|e| FseError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn read_manifest(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| FseError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Loads `<root>/shadow/<id>.*`, `<root>/target/<id>.*` and optional
/// `<root>/mask/<id>.*`, sorted by id.
pub fn load_paired_dataset(dir: &Path, manifest: Option<&Path>) -> Result<Vec<SamplePair>> {
    if !dir.is_dir() {
        return Err(FseError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let shadow_dir = dir.join("shadow");
    let target_dir = dir.join("target");
    let mask_dir = dir.join("mask");
    match (shadow_dir.is_dir(), target_dir.is_dir()) {
        (false, false) => return Ok(Vec::new()),
        (true, false) => {
            return Err(FseError::Pairing(format!(
                "{} exists but {} does not",
                shadow_dir.display(),
                target_dir.display()
            )))
        }
        (false, true) => {
            return Err(FseError::Pairing(format!(
                "{} exists but {} does not",
                target_dir.display(),
                shadow_dir.display()
            )))
        }
        (true, true) => {}
    }

    let shadows = list_images(&shadow_dir)?;
    let targets = list_images(&target_dir)?;
    let masks = if mask_dir.is_dir() {
        list_images(&mask_dir)?
    } else {
        Vec::new()
    };
    let target_ids: BTreeSet<&str> = targets.iter().map(|(id, _)| id.as_str()).collect();
    let shadow_ids: BTreeSet<&str> = shadows.iter().map(|(id, _)| id.as_str()).collect();
    if let Some((_, path)) = shadows.iter().find(|(id, _)| !target_ids.contains(id.as_str())) {
        return Err(FseError::Pairing(format!(
            "no target for shadow image {}",
            path.display()
        )));
    }
    if let Some((_, path)) = targets.iter().find(|(id, _)| !shadow_ids.contains(id.as_str())) {
        return Err(FseError::Pairing(format!(
            "no shadow image for target {}",
            path.display()
        )));
    }

    let wanted = manifest.map(read_manifest).transpose()?;
    if let Some(w) = &wanted {
        if let Some(missing) = w.iter().find(|id| !shadow_ids.contains(id.as_str())) {
            return Err(FseError::Pairing(format!(
                "manifest id `{missing}` has no files in {}",
                dir.display()
            )));
        }
    }

    let mut pairs = Vec::new();
    for ((id, shadow_path), (_, target_path)) in shadows.iter().zip(&targets) {
        if wanted.as_ref().is_some_and(|w| !w.contains(id)) {
            continue;
        }
        let shadow = load_image(shadow_path)?;
        let target = load_image(target_path)?;
        let mask = masks
            .iter()
            .find(|(mid, _)| mid == id)
            .map(|(_, p)| load_mask(p))
            .transpose()?;
        pairs.push(SamplePair::new(id.clone(), shadow, target, mask)?);
    }
    Ok(pairs)
}
