//! Procedural shadow / shadow-free pair synthesis.
//!
//! A binary stencil (ellipse, polygon, band or an occluder silhouette) is
//! feathered with a truncated Gaussian (σ = feather/3, support radius
//! `ceil(feather)`), scaled to its peak opacity and applied as multiplicative
//! darkening. Optional micro-shadows add small low-opacity spots inside the
//! shadowed region only, so pixels outside the feathered support are never
//! touched.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FseError, Result};
use crate::imaging::{ImageTensor, MaskTensor, SamplePair};

pub const OPACITY_RANGE: (f64, f64) = (0.15, 0.45);
pub const FLOW_RANGE: (f64, f64) = (0.10, 0.30);
pub const HARD_FEATHER: (f64, f64) = (5.0, 15.0);
pub const SOFT_FEATHER: (f64, f64) = (25.0, 50.0);
pub const MAX_MICRO_DENSITY: f64 = 0.05;
/// Alpha above which a synthesized pixel counts as shadowed in the mask.
pub const MASK_THRESHOLD: f64 = 0.05;
const MIN_SYNTH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hardness {
    Hard,
    Soft,
}

impl Hardness {
    pub fn feather_range(self) -> (f64, f64) {
        match self {
            Hardness::Hard => HARD_FEATHER,
            Hardness::Soft => SOFT_FEATHER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccluderKind {
    Hair,
    Hat,
    Hand,
    BlindSlats,
}

impl OccluderKind {
    pub const ALL: [OccluderKind; 4] = [
        OccluderKind::Hair,
        OccluderKind::Hat,
        OccluderKind::Hand,
        OccluderKind::BlindSlats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OccluderKind::Hair => "hair",
            OccluderKind::Hat => "hat",
            OccluderKind::Hand => "hand",
            OccluderKind::BlindSlats => "blind_slats",
        }
    }

    /// Membership test in the canonical frame `[-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            // wavy band, like a lock of hair falling across the face
            OccluderKind::Hair => (v - 0.25 * (3.0 * PI * u).sin()).abs() <= 0.3 && u.abs() <= 1.0,
            // half-disk: a brim seen from below
            OccluderKind::Hat => u * u + v * v <= 1.0 && v <= 0.0,
            // five-lobe blob
            OccluderKind::Hand => {
                let r = (u * u + v * v).sqrt();
                let theta = v.atan2(u);
                r <= 0.6 + 0.35 * (5.0 * theta).cos().max(0.0)
            }
            // parallel slats inside the unit square
            OccluderKind::BlindSlats => {
                u.abs() <= 1.0 && v.abs() <= 1.0 && ((v + 1.0) * 2.5).rem_euclid(1.0) < 0.5
            }
        }
    }
}

/// A named binary stencil rendered from one of the procedural silhouettes.
#[derive(Debug, Clone)]
pub struct OccluderTemplate {
    pub name: String,
    pub size: usize,
    /// Row-major `size × size`, values in {0, 1}.
    pub silhouette: Vec<u8>,
}

impl OccluderTemplate {
    pub fn render(kind: OccluderKind, size: usize) -> Self {
        let mut silhouette = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
                let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
                silhouette.push(kind.contains(u, v) as u8);
            }
        }
        Self {
            name: kind.name().to_string(),
            size,
            silhouette,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShadowShape {
    Ellipse,
    Polygon { vertices: usize },
    Band,
    Occluder { template: OccluderKind },
}

/// Parameters of one synthesized cast shadow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub shape: ShadowShape,
    pub opacity: f64,
    pub flow: f64,
    pub hardness: Hardness,
    pub feather_radius: f64,
    /// Normalized center `(x, y)`.
    pub position: (f64, f64),
    /// Shape extent as a fraction of `min(H, W)`.
    pub extent: f64,
    /// Minor/major axis ratio of the shape frame.
    pub aspect: f64,
    /// Rotation of the shape frame in radians.
    pub angle: f64,
    /// Fraction of shadowed pixels receiving micro-shadow spots.
    pub micro_density: f64,
    pub seed: u64,
}

impl ShadowSpec {
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !within(self.opacity, OPACITY_RANGE) {
            return Err(FseError::Config(format!("opacity {} outside [0.15, 0.45]", self.opacity)));
        }
        if !within(self.flow, FLOW_RANGE) {
            return Err(FseError::Config(format!("flow {} outside [0.10, 0.30]", self.flow)));
        }
        if !within(self.feather_radius, self.hardness.feather_range()) {
            return Err(FseError::Config(format!(
                "feather radius {} outside the {:?} range {:?}",
                self.feather_radius,
                self.hardness,
                self.hardness.feather_range()
            )));
        }
        if !within(self.micro_density, (0.0, MAX_MICRO_DENSITY)) {
            return Err(FseError::Config(format!(
                "micro-shadow density {} outside [0, 0.05]",
                self.micro_density
            )));
        }
        let finite = [self.position.0, self.position.1, self.extent, self.aspect, self.angle];
        if finite.iter().any(|v| !v.is_finite()) || self.extent < 0.0 || self.aspect <= 0.0 {
            return Err(FseError::Config("shadow geometry must be finite and non-negative".into()));
        }
        if let ShadowShape::Polygon { vertices } = self.shape {
            if vertices < 3 {
                return Err(FseError::Config("polygon needs at least 3 vertices".into()));
            }
        }
        Ok(())
    }

    /// Peak alpha after brush-flow modulation.
    pub fn peak_alpha(&self) -> f64 {
        self.opacity * (self.flow / 0.30 + 0.5).min(1.0)
    }

    pub fn sigma(&self) -> f64 {
        self.feather_radius / 3.0
    }

    pub fn support_radius(&self) -> usize {
        self.feather_radius.ceil() as usize
    }
}

/// Draws every field uniformly from its legal range.
pub fn sample_spec(seed: u64, size: (usize, usize)) -> Result<ShadowSpec> {
    let (h, w) = size;
    if h < MIN_SYNTH_SIZE || w < MIN_SYNTH_SIZE {
        return Err(FseError::Config(format!(
            "synthesis needs at least {MIN_SYNTH_SIZE}x{MIN_SYNTH_SIZE}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = match rng.gen_range(0..4) {
        0 => ShadowShape::Ellipse,
        1 => ShadowShape::Polygon {
            vertices: rng.gen_range(3..=8),
        },
        2 => ShadowShape::Band,
        _ => ShadowShape::Occluder {
            template: OccluderKind::ALL[rng.gen_range(0..4)],
        },
    };
    let hardness = if rng.gen_bool(0.5) {
        Hardness::Hard
    } else {
        Hardness::Soft
    };
    let (flo, fhi) = hardness.feather_range();
    Ok(ShadowSpec {
        shape,
        opacity: rng.gen_range(OPACITY_RANGE.0..=OPACITY_RANGE.1),
        flow: rng.gen_range(FLOW_RANGE.0..=FLOW_RANGE.1),
        hardness,
        feather_radius: rng.gen_range(flo..=fhi),
        position: (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
        extent: rng.gen_range(0.3..=0.7),
        aspect: rng.gen_range(0.4..=1.0),
        angle: rng.gen_range(0.0..PI),
        micro_density: rng.gen_range(0.0..=0.03),
        seed: rng.gen(),
    })
}

/// Polygon vertex radii in the shape frame, jittered per seed.
fn polygon_vertices(spec: &ShadowSpec, n: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n)
        .map(|i| {
            let theta = 2.0 * PI * (i as f64 + rng.gen_range(-0.3..0.3)) / n as f64;
            let r = rng.gen_range(0.6..=1.0);
            (r * theta.cos(), r * theta.sin())
        })
        .collect()
}

fn point_in_polygon(u: f64, v: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Binary stencil over the frame grown by `pad` pixels on every side.
/// Returned row-major with dimensions `(h + 2 pad) × (w + 2 pad)`.
pub fn render_stencil(spec: &ShadowSpec, (h, w): (usize, usize), pad: usize) -> Vec<f64> {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let mut out = vec![0.0; ph * pw];
    let half_major = 0.5 * spec.extent * h.min(w) as f64;
    if half_major <= 0.0 {
        return out;
    }
    let half_minor = half_major * spec.aspect;
    let cx = spec.position.0 * w as f64;
    let cy = spec.position.1 * h as f64;
    let (sin, cos) = spec.angle.sin_cos();
    let poly = match spec.shape {
        ShadowShape::Polygon { vertices } => polygon_vertices(spec, vertices),
        _ => Vec::new(),
    };
    for py in 0..ph {
        for px in 0..pw {
            // pixel center in frame coordinates
            let x = px as f64 - pad as f64 + 0.5 - cx;
            let y = py as f64 - pad as f64 + 0.5 - cy;
            let along = (x * cos + y * sin) / half_major;
            let across = (-x * sin + y * cos) / half_minor;
            let inside = match &spec.shape {
                ShadowShape::Ellipse => along * along + across * across <= 1.0,
                ShadowShape::Polygon { .. } => point_in_polygon(along, across, &poly),
                // infinite strip through the center, half-width = half_minor
                ShadowShape::Band => across.abs() <= 1.0,
                ShadowShape::Occluder { template } => template.contains(along, across),
            };
            if inside {
                out[py * pw + px] = 1.0;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps on `[-radius, radius]`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Feathered, opacity-scaled alpha map for `spec` over an `h × w` frame.
pub fn render_shadow_alpha(spec: &ShadowSpec, size: (usize, usize)) -> Result<MaskTensor> {
    let alpha = shadow_alpha_values(spec, size)?;
    let (h, w) = size;
    MaskTensor::from_vec(alpha.iter().map(|&a| a as f32).collect(), (1, h, w))
}

fn shadow_alpha_values(spec: &ShadowSpec, (h, w): (usize, usize)) -> Result<Vec<f64>> {
    spec.validate()?;
    let r = spec.support_radius();
    let stencil = render_stencil(spec, (h, w), r);
    let pw = w + 2 * r;
    let taps = gaussian_taps(spec.sigma(), r);

    // horizontal pass over all padded rows, valid columns only
    let mut horiz = vec![0.0; (h + 2 * r) * w];
    for y in 0..h + 2 * r {
        let row = &stencil[y * pw..(y + 1) * pw];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let s = row[x + t];
                if s != 0.0 {
                    acc += g * s;
                }
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut blurred = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let s = horiz[(y + t) * w + x];
                if s != 0.0 {
                    acc += g * s;
                }
            }
            blurred[y * w + x] = acc;
        }
    }
    let max = blurred.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        let scale = spec.peak_alpha() / max;
        for v in &mut blurred {
            *v = (*v * scale).min(spec.peak_alpha());
        }
    }
    Ok(blurred)
}

/// Multiplicative darkening, equal on every channel: `clean · (1 − alpha)`.
pub fn composite_shadow(clean: &ImageTensor, alpha: &MaskTensor) -> Result<ImageTensor> {
    let (n, c, h, w) = clean.dims();
    let (an, _, ah, aw) = alpha.dims();
    if n != 1 || c != 3 || an != 1 || (ah, aw) != (h, w) {
        return Err(FseError::Shape(format!(
            "composite_shadow: clean {:?}, alpha {:?}",
            clean.dims(),
            alpha.dims()
        )));
    }
    let a = alpha.tensor().to_dtype(clean.tensor().dtype())?;
    let keep = a.affine(-1.0, 1.0)?;
    ImageTensor::new(clean.tensor().broadcast_mul(&keep)?)
}

/// Spot alpha (each ≤ 0.1, radius ≤ 3 px) covering roughly `density` of the frame.
fn micro_alpha(h: usize, w: usize, density: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=MAX_MICRO_DENSITY).contains(&density) {
        return Err(FseError::Config(format!(
            "micro-shadow density {density} outside [0, 0.05]"
        )));
    }
    let mut alpha = vec![0.0f64; h * w];
    if density == 0.0 {
        return Ok(alpha);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_area = PI * 2.0 * 2.0;
    let count = ((density * (h * w) as f64) / mean_area).round().max(1.0) as usize;
    for _ in 0..count {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let radius = rng.gen_range(1.0..=3.0f64);
        let opacity = rng.gen_range(0.02..=0.1f64);
        let r = radius.ceil() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let x = cx as isize + dx;
                let y = cy as isize + dy;
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= radius {
                    let a = opacity * (1.0 - (d / radius).powi(2)).max(0.0);
                    let slot = &mut alpha[y as usize * w + x as usize];
                    *slot = slot.max(a);
                }
            }
        }
    }
    Ok(alpha)
}

fn darken(clean: &ImageTensor, alpha: &[f64]) -> Result<ImageTensor> {
    let (n, c, h, w) = clean.dims();
    let data = clean.to_vec()?;
    let out: Vec<f32> = data
        .chunks_exact(h * w)
        .flat_map(|plane| {
            plane
                .iter()
                .zip(alpha)
                .map(|(&v, &a)| if a == 0.0 { v } else { (v as f64 * (1.0 - a)) as f32 })
        })
        .collect();
    ImageTensor::from_vec(out, (n, c, h, w))
}

/// Scatters small low-opacity darkening spots over the whole image.
pub fn add_micro_shadows(img: &ImageTensor, density: f64, seed: u64) -> Result<ImageTensor> {
    let (n, _, h, w) = img.dims();
    if n != 1 {
        return Err(FseError::Shape("add_micro_shadows expects N = 1".into()));
    }
    let alpha = micro_alpha(h, w, density, seed)?;
    darken(img, &alpha)
}

/// `(shadow, target = clean, mask = alpha > 0.05)`; micro-shadows are confined
/// to pixels the cast shadow already touches.
pub fn synthesize_pair(clean: &ImageTensor, spec: &ShadowSpec, id: &str) -> Result<SamplePair> {
    let (n, c, h, w) = clean.dims();
    if n != 1 || c != 3 {
        return Err(FseError::Shape(format!(
            "synthesis expects a [1, 3, H, W] image, got {:?}",
            clean.dims()
        )));
    }
    let alpha = shadow_alpha_values(spec, (h, w))?;
    let micro = micro_alpha(h, w, spec.micro_density, spec.seed)?;
    let combined: Vec<f64> = alpha
        .iter()
        .zip(&micro)
        .map(|(&a, &m)| if a > 0.0 { 1.0 - (1.0 - a) * (1.0 - m) } else { 0.0 })
        .collect();
    let shadow = darken(clean, &combined)?;
    let mask: Vec<f32> = alpha
        .iter()
        .map(|&a| if a > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    SamplePair::new(
        id,
        shadow,
        clean.clone(),
        Some(MaskTensor::from_vec(mask, (1, h, w))?),
    )
}

/// A smooth, face-like procedural clean image used when no photographs are at
/// hand: a skin-toned oval on a gradient background with a few darker features.
pub fn procedural_face(seed: u64, size: usize) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skin = [
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.4..0.75),
        rng.gen_range(0.3..0.6),
    ];
    let bg_top = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg_bot = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let cx = rng.gen_range(0.42..0.58);
    let cy = rng.gen_range(0.45..0.55);
    let rx = rng.gen_range(0.25..0.35);
    let ry = rng.gen_range(0.33..0.43);
    let freq = rng.gen_range(4.0..9.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let s = size as f64;
    let mut data = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let v = (y as f64 + 0.5) / s;
            let face = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            let texture = 0.04 * (freq * 2.0 * PI * u + phase).sin() * (freq * PI * v).cos();
            let eye = |ex: f64| ((u - ex) / 0.05).powi(2) + ((v - (cy - 0.08)) / 0.03).powi(2) <= 1.0;
            let mouth = ((u - cx) / 0.1).powi(2) + ((v - (cy + 0.18)) / 0.025).powi(2) <= 1.0;
            for c in 0..3 {
                let bg = bg_top[c] * (1.0 - v) + bg_bot[c] * v;
                let mut val = if face <= 1.0 {
                    let shade = 1.0 - 0.25 * face;
                    skin[c] * shade + texture
                } else {
                    bg + 0.5 * texture
                };
                if face <= 1.0 && (eye(cx - 0.11) || eye(cx + 0.11)) {
                    val *= 0.35;
                }
                if face <= 1.0 && mouth {
                    val *= 0.6;
                }
                data[c * size * size + y * size + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::from_vec(data, (1, 3, size, size))
}
