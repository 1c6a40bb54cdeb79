//! Procedural episode generation with controllable domain shift.
//!
//! Scenes are parametric shapes (one foreground class per scene) rendered on
//! textured backgrounds. A domain owns a palette, a noise texture and an
//! intensity curve; the mask depends only on `(seed, class)`, so the same
//! scene re-rendered under another domain keeps its geometry while its pixel
//! statistics move. Source and target class sets are disjoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOURCE_DOMAIN_ID: u32 = 0;
pub const N_SOURCE_CLASSES: u32 = 12;
pub const CLASSES_PER_TARGET: u32 = 4;
pub const N_TARGET_DOMAINS: u32 = 3;
/// Background label used by the pixel-contrastive objective.
pub const BACKGROUND_CLASS: u32 = 0;

const MIN_COVERAGE: f64 = 0.05;
const MAX_COVERAGE: f64 = 0.60;

// ---------------------------------------------------------------------------
// grids
// ---------------------------------------------------------------------------

/// RGB image in `[0, 1]`, shape `[3, h, w]`, `h == w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub pixels: Array3<f64>,
}

impl ImageGrid {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != w {
            return Err(Error::Shape(format!("image must be [3,h,h], got [{c},{h},{w}]")));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Shape("image values outside [0,1]".into()));
        }
        Ok(ImageGrid { pixels })
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().1
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }
}

/// Binary foreground mask, shape `[h, w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub labels: Array2<u8>,
}

impl MaskGrid {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        let (h, w) = labels.dim();
        if h != w {
            return Err(Error::Shape(format!("mask must be square, got [{h},{w}]")));
        }
        if !labels.iter().all(|&v| v <= 1) {
            return Err(Error::Shape("mask values must be 0/1".into()));
        }
        Ok(MaskGrid { labels })
    }

    pub fn side(&self) -> usize {
        self.labels.dim().0
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn coverage(&self) -> f64 {
        self.foreground_count() as f64 / (self.side() * self.side()) as f64
    }
}

// ---------------------------------------------------------------------------
// domains
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextureParams {
    pub amplitude: f64,
    pub frequency: usize,
}

/// Monotone per-channel curve: gamma then contrast about mid-gray.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntensityParams {
    pub gamma: [f64; 3],
    pub contrast: f64,
}

impl IntensityParams {
    fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let g = v[c].clamp(0.0, 1.0).powf(self.gamma[c]);
            out[c] = (0.5 + self.contrast * (g - 0.5)).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Palette {
    pub background: [f64; 3],
    pub class_colors: BTreeMap<u32, [f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub texture: TextureParams,
    pub palette: Palette,
    pub intensity: IntensityParams,
    pub class_set: Vec<u32>,
}

impl DomainSpec {
    pub fn contains_class(&self, class_id: u32) -> bool {
        self.class_set.contains(&class_id)
    }
}

/// One source domain plus the synthetic target domains.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
}

impl Benchmark {
    pub fn domain(&self, id: u32) -> Option<&DomainSpec> {
        if id == self.source.domain_id {
            Some(&self.source)
        } else {
            self.targets.iter().find(|d| d.domain_id == id)
        }
    }

    pub fn all_domains(&self) -> Vec<&DomainSpec> {
        let mut v = vec![&self.source];
        v.extend(self.targets.iter());
        v
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Distinct base color per class on a golden-angle hue wheel.
fn base_class_color(class_id: u32) -> [f64; 3] {
    let hue = (class_id as f64 * 137.508) % 360.0;
    let val = 0.62 + 0.18 * ((class_id % 3) as f64 / 2.0);
    hsv_to_rgb(hue, 0.65, val)
}

fn domain_color(domain_id: u32, base: [f64; 3]) -> [f64; 3] {
    match domain_id {
        // source: vivid palette as-is
        0 => base,
        // "aerial": rotated channels, lower saturation
        1 => {
            let rot = [base[1], base[2], base[0]];
            let l = luminance(rot);
            [
                0.55 * rot[0] + 0.45 * l,
                0.55 * rot[1] + 0.45 * l,
                0.55 * rot[2] + 0.45 * l,
            ]
        }
        // "clinical": near-grayscale, dark lesions on light ground
        2 => {
            let l = luminance(base);
            let g = 0.22 + 0.22 * l;
            [g, g + 0.02, g]
        }
        // "thermal": inverted intensities
        _ => {
            let inv = [1.0 - base[0], 1.0 - base[1], 1.0 - base[2]];
            [0.15 + 0.75 * inv[0], 0.10 + 0.75 * inv[1], 0.05 + 0.75 * inv[2]]
        }
    }
}

fn domain_background(domain_id: u32) -> [f64; 3] {
    match domain_id {
        0 => [0.34, 0.44, 0.32],
        1 => [0.48, 0.42, 0.30],
        2 => [0.72, 0.74, 0.72],
        _ => [0.80, 0.76, 0.70],
    }
}

fn domain_texture(domain_id: u32) -> TextureParams {
    match domain_id {
        0 => TextureParams { amplitude: 0.07, frequency: 6 },
        1 => TextureParams { amplitude: 0.16, frequency: 13 },
        2 => TextureParams { amplitude: 0.10, frequency: 3 },
        _ => TextureParams { amplitude: 0.09, frequency: 9 },
    }
}

fn domain_intensity(domain_id: u32) -> IntensityParams {
    match domain_id {
        0 => IntensityParams { gamma: [1.0, 1.0, 1.0], contrast: 1.0 },
        1 => IntensityParams { gamma: [0.85, 1.15, 1.0], contrast: 1.05 },
        2 => IntensityParams { gamma: [1.45, 1.45, 1.45], contrast: 0.85 },
        _ => IntensityParams { gamma: [0.75, 0.95, 1.30], contrast: 1.10 },
    }
}

fn make_domain(domain_id: u32, class_set: Vec<u32>) -> DomainSpec {
    let class_colors = class_set
        .iter()
        .map(|&c| (c, domain_color(domain_id, base_class_color(c))))
        .collect();
    DomainSpec {
        domain_id,
        texture: domain_texture(domain_id),
        palette: Palette {
            background: domain_background(domain_id),
            class_colors,
        },
        intensity: domain_intensity(domain_id),
        class_set,
    }
}

/// Standard layout: source classes `1..=12`, three target domains with four
/// classes each (`13..=16`, `17..=20`, `21..=24`).
pub fn default_benchmark() -> Benchmark {
    let source = make_domain(SOURCE_DOMAIN_ID, (1..=N_SOURCE_CLASSES).collect());
    let targets = (1..=N_TARGET_DOMAINS)
        .map(|t| {
            let lo = N_SOURCE_CLASSES + (t - 1) * CLASSES_PER_TARGET + 1;
            make_domain(t, (lo..lo + CLASSES_PER_TARGET).collect())
        })
        .collect();
    Benchmark { source, targets }
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeFamily {
    Disk,
    Rect,
    Ring,
    Triangle,
    Diamond,
    Cross,
    Ellipse,
    Blob,
}

fn family_of(class_id: u32) -> ShapeFamily {
    use ShapeFamily::*;
    match (class_id.saturating_sub(1)) % 8 {
        0 => Disk,
        1 => Rect,
        2 => Ring,
        3 => Triangle,
        4 => Diamond,
        5 => Cross,
        6 => Ellipse,
        _ => Blob,
    }
}

struct ShapeParams {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    r: f64,
    rot: f64,
    aspect: f64,
    blob_amp: [f64; 3],
    blob_phase: [f64; 3],
}

impl ShapeParams {
    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let (s, c) = self.rot.sin_cos();
        let u = (c * dx + s * dy) / self.r;
        let v = (-s * dx + c * dy) / (self.r * self.aspect);
        match self.family {
            ShapeFamily::Disk | ShapeFamily::Ellipse => u * u + v * v <= 1.0,
            ShapeFamily::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeFamily::Ring => {
                let d2 = u * u + v * v;
                (0.45 * 0.45..=1.0).contains(&d2)
            }
            ShapeFamily::Triangle => {
                // equilateral triangle, circumradius 1, apex up
                let y = -v;
                y >= -0.5 && y <= 1.0 - 1.732_050_8 * u.abs()
            }
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Cross => {
                (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0)
            }
            ShapeFamily::Blob => {
                let rho = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                let mut rr = 1.0;
                for k in 0..3 {
                    rr += self.blob_amp[k] * ((k as f64 + 2.0) * phi + self.blob_phase[k]).sin();
                }
                rho <= rr
            }
        }
    }

    /// Approximate area in units of `r^2` (before aspect).
    fn area_factor(&self) -> f64 {
        match self.family {
            ShapeFamily::Disk | ShapeFamily::Ellipse => std::f64::consts::PI,
            ShapeFamily::Rect => 4.0,
            ShapeFamily::Ring => std::f64::consts::PI * (1.0 - 0.45 * 0.45),
            ShapeFamily::Triangle => 1.3,
            ShapeFamily::Diamond => 2.0,
            ShapeFamily::Cross => 2.31,
            ShapeFamily::Blob => std::f64::consts::PI,
        }
    }
}

fn rasterize(shape: &ShapeParams, side: usize) -> Array2<u8> {
    Array2::from_shape_fn((side, side), |(y, x)| {
        u8::from(shape.contains(x as f64 + 0.5, y as f64 + 0.5))
    })
}

/// Mask for `(seed, class)`; independent of the domain by construction.
fn generate_mask(rng_seed: u64, class_id: u32, side: usize) -> MaskGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, u64::from(class_id) << 1 | 1));
    let h = side as f64;
    // class-conditioned coverage band keeps classes visually distinct
    let band = 0.10 + 0.05 * f64::from(class_id % 4);
    let target = rng.random_range(band..band + 0.14);
    let family = family_of(class_id);
    let aspect = match family {
        ShapeFamily::Ellipse => rng.random_range(0.45..0.7),
        ShapeFamily::Rect => rng.random_range(0.55..0.95),
        _ => 1.0,
    };
    let mut shape = ShapeParams {
        family,
        cx: rng.random_range(0.32 * h..0.68 * h),
        cy: rng.random_range(0.32 * h..0.68 * h),
        r: 1.0,
        rot: rng.random_range(0.0..std::f64::consts::PI),
        aspect,
        blob_amp: [
            rng.random_range(0.05..0.22),
            rng.random_range(0.05..0.22),
            rng.random_range(0.05..0.22),
        ],
        blob_phase: [
            rng.random_range(0.0..6.28),
            rng.random_range(0.0..6.28),
            rng.random_range(0.0..6.28),
        ],
    };
    shape.r = (target * h * h / (shape.area_factor() * shape.aspect)).sqrt();

    for _ in 0..4 {
        let mask = rasterize(&shape, side);
        let cov = mask.iter().filter(|&&v| v == 1).count() as f64 / (h * h);
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&cov) && cov > 0.0 {
            return MaskGrid { labels: mask };
        }
        if cov <= f64::EPSILON {
            shape.r *= 1.5;
        } else {
            shape.r *= (target / cov).sqrt().clamp(0.5, 2.0);
        }
    }
    // guaranteed fallback: centered disk at 20% coverage
    let disk = ShapeParams {
        family: ShapeFamily::Disk,
        cx: 0.5 * h,
        cy: 0.5 * h,
        r: (0.20 * h * h / std::f64::consts::PI).sqrt(),
        rot: 0.0,
        aspect: 1.0,
        blob_amp: [0.0; 3],
        blob_phase: [0.0; 3],
    };
    MaskGrid { labels: rasterize(&disk, side) }
}

/// Bilinear value noise in `[-0.5, 0.5]`.
struct ValueNoise {
    lattice: Array2<f64>,
    freq: usize,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, freq: usize) -> Self {
        let n = freq + 2;
        ValueNoise {
            lattice: Array2::from_shape_fn((n, n), |_| rng.random_range(-0.5..0.5)),
            freq,
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let x = u * self.freq as f64;
        let y = v * self.freq as f64;
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x.floor();
        let fy = y - y.floor();
        let l = &self.lattice;
        let top = l[[y0, x0]] * (1.0 - fx) + l[[y0, x0 + 1]] * fx;
        let bot = l[[y0 + 1, x0]] * (1.0 - fx) + l[[y0 + 1, x0 + 1]] * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn render_image(mask: &MaskGrid, domain: &DomainSpec, class_id: u32, rng_seed: u64) -> ImageGrid {
    let side = mask.side();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        rng_seed,
        0x5eed_0000 | u64::from(domain.domain_id),
    ));
    let coarse = ValueNoise::new(&mut rng, domain.texture.frequency);
    let fine = ValueNoise::new(&mut rng, domain.texture.frequency * 2 + 1);
    let fg = domain.palette.class_colors[&class_id];
    let bg = domain.palette.background;
    let amp = domain.texture.amplitude;

    let mut pixels = Array3::<f64>::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let v = (y as f64 + 0.5) / side as f64;
            let n = coarse.at(u, v) + 0.5 * fine.at(u, v);
            let jitter = rng.random_range(-0.015..0.015);
            let base = if mask.labels[[y, x]] == 1 { fg } else { bg };
            let mut col = [0.0; 3];
            for c in 0..3 {
                col[c] = base[c] + amp * n + jitter;
            }
            let col = domain.intensity.apply(col);
            for c in 0..3 {
                pixels[[c, y, x]] = col[c];
            }
        }
    }
    ImageGrid { pixels }
}

/// Deterministic scene for `(seed, domain, class)`.
pub fn generate_scene(
    rng_seed: u64,
    domain: &DomainSpec,
    class_id: u32,
    side: usize,
) -> Result<(ImageGrid, MaskGrid)> {
    if !domain.contains_class(class_id) {
        return Err(Error::InvalidClass {
            class: class_id,
            domain: domain.domain_id,
        });
    }
    let mask = generate_mask(rng_seed, class_id, side);
    debug_assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&mask.coverage()));
    let image = render_image(&mask, domain, class_id, rng_seed);
    Ok((image, mask))
}

// ---------------------------------------------------------------------------
// episodes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<(ImageGrid, MaskGrid)>,
    pub query_image: ImageGrid,
    pub query_mask: MaskGrid,
    pub class_id: u32,
    pub domain_id: u32,
}

impl Episode {
    pub fn k_shots(&self) -> usize {
        self.support.len()
    }
}

/// K support scenes plus one query scene of a single class, all with
/// distinct scene seeds.
pub fn sample_episode(
    rng_seed: u64,
    domain: &DomainSpec,
    k_shots: usize,
    side: usize,
) -> Result<Episode> {
    if k_shots == 0 {
        return Err(Error::Shape("k_shots must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, 0xe915_0de0 | u64::from(domain.domain_id)));
    let class_id = domain.class_set[rng.random_range(0..domain.class_set.len())];
    let mut support = Vec::with_capacity(k_shots);
    for i in 0..k_shots {
        let scene_seed = mix_seed(rng_seed, 0xa000 + i as u64);
        support.push(generate_scene(scene_seed, domain, class_id, side)?);
    }
    let query_seed = mix_seed(rng_seed, 0xb000 + k_shots as u64);
    let (query_image, query_mask) = generate_scene(query_seed, domain, class_id, side)?;
    Ok(Episode {
        support,
        query_image,
        query_mask,
        class_id,
        domain_id: domain.domain_id,
    })
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// One sampled transform; geometric parts apply to image and mask alike,
/// photometric parts to the image only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
    pub brightness: f64,
    pub hue_angle: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            hflip: false,
            vflip: false,
            quarter_turns: 0,
            brightness: 0.0,
            hue_angle: 0.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugmentDraw {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            brightness: rng.random_range(-0.15..0.15),
            hue_angle: rng.random_range(-0.5..0.5),
        }
    }

    pub fn geometric_only(mut self) -> Self {
        self.brightness = 0.0;
        self.hue_angle = 0.0;
        self
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

fn remap_index(side: usize, d: &AugmentDraw, y: usize, x: usize) -> (usize, usize) {
    // destination (y, x) <- source coordinates under flip-then-rotate
    let (mut sy, mut sx) = (y, x);
    // invert rotation: rotating source by k quarter turns CCW
    for _ in 0..(d.quarter_turns % 4) {
        let (ny, nx) = (sx, side - 1 - sy);
        sy = ny;
        sx = nx;
    }
    if d.hflip {
        sx = side - 1 - sx;
    }
    if d.vflip {
        sy = side - 1 - sy;
    }
    (sy, sx)
}

/// Rotate an RGB vector about the gray axis by `angle` radians.
fn hue_rotate(c: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, co) = angle.sin_cos();
    let a = 1.0 / 3.0_f64.sqrt();
    let one_c = 1.0 - co;
    // Rodrigues rotation matrix, axis (a, a, a)
    let m = [
        [co + a * a * one_c, a * a * one_c - a * s, a * a * one_c + a * s],
        [a * a * one_c + a * s, co + a * a * one_c, a * a * one_c - a * s],
        [a * a * one_c - a * s, a * a * one_c + a * s, co + a * a * one_c],
    ];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2]).clamp(0.0, 1.0);
    }
    out
}

/// Apply a draw. Identity draws return bit-identical inputs.
pub fn apply_augment(image: &ImageGrid, mask: &MaskGrid, d: &AugmentDraw) -> (ImageGrid, MaskGrid) {
    if d.is_identity() {
        return (image.clone(), mask.clone());
    }
    let side = image.side();
    let geometric = d.hflip || d.vflip || d.quarter_turns % 4 != 0;
    let (mut img, mut msk) = if geometric {
        let mut img = Array3::<f64>::zeros((3, side, side));
        let mut msk = Array2::<u8>::zeros((side, side));
        for y in 0..side {
            for x in 0..side {
                let (sy, sx) = remap_index(side, d, y, x);
                for c in 0..3 {
                    img[[c, y, x]] = image.pixels[[c, sy, sx]];
                }
                msk[[y, x]] = mask.labels[[sy, sx]];
            }
        }
        (img, msk)
    } else {
        (image.pixels.clone(), mask.labels.clone())
    };
    if d.brightness != 0.0 || d.hue_angle != 0.0 {
        for y in 0..side {
            for x in 0..side {
                let mut col = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                if d.hue_angle != 0.0 {
                    col = hue_rotate(col, d.hue_angle);
                }
                for ch in &mut col {
                    *ch = (*ch + d.brightness).clamp(0.0, 1.0);
                }
                img[[0, y, x]] = col[0];
                img[[1, y, x]] = col[1];
                img[[2, y, x]] = col[2];
            }
        }
    }
    let _ = &mut msk;
    (ImageGrid { pixels: img }, MaskGrid { labels: msk })
}

/// Random flip/rotation/brightness/hue draw applied to a support pair.
pub fn augment_support(
    image: &ImageGrid,
    mask: &MaskGrid,
    rng_seed: u64,
) -> (ImageGrid, MaskGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, 0xau64));
    let d = AugmentDraw::sample(&mut rng);
    apply_augment(image, mask, &d)
}

/// Strong photometric/texture transform producing a pseudo-target view of a
/// source image. Geometry is untouched, so the source mask stays valid.
pub fn pseudo_target_transform(image: &ImageGrid, rng_seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, 0x9d0_7a67));
    let side = image.side();
    let angle = rng.random_range(0.7..2.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let gamma = [
        rng.random_range(0.55..1.9),
        rng.random_range(0.55..1.9),
        rng.random_range(0.55..1.9),
    ];
    let contrast = rng.random_range(0.75..1.25);
    let brightness = rng.random_range(-0.10..0.10);
    let amp = rng.random_range(0.06..0.20);
    let freq = rng.random_range(3..14);
    let noise = ValueNoise::new(&mut rng, freq);

    let mut img = Array3::<f64>::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let col = [
                image.pixels[[0, y, x]],
                image.pixels[[1, y, x]],
                image.pixels[[2, y, x]],
            ];
            let mut col = hue_rotate(col, angle);
            let u = (x as f64 + 0.5) / side as f64;
            let v = (y as f64 + 0.5) / side as f64;
            let n = noise.at(u, v);
            for (c, ch) in col.iter_mut().enumerate() {
                let g = ch.clamp(0.0, 1.0).powf(gamma[c]);
                *ch = (0.5 + contrast * (g - 0.5) + amp * n + brightness).clamp(0.0, 1.0);
            }
            img[[0, y, x]] = col[0];
            img[[1, y, x]] = col[1];
            img[[2, y, x]] = col[2];
        }
    }
    ImageGrid { pixels: img }
}

// ---------------------------------------------------------------------------
// support-only access guard
// ---------------------------------------------------------------------------

/// Shared counter proving that a fine-tuning run never dereferenced a query
/// mask. Locked guards refuse access outright.
#[derive(Clone, Debug, Default)]
pub struct QueryMaskGuard {
    accesses: Arc<AtomicUsize>,
    locked: bool,
}

impl QueryMaskGuard {
    pub fn locked() -> Self {
        QueryMaskGuard {
            accesses: Arc::new(AtomicUsize::new(0)),
            locked: true,
        }
    }

    pub fn unlocked() -> Self {
        QueryMaskGuard::default()
    }

    pub fn access_count(&self) -> usize {
        self.accesses.load(Ordering::SeqCst)
    }
}

/// A query mask that records (or denies) every read.
#[derive(Clone, Debug)]
pub struct GuardedMask {
    mask: MaskGrid,
    guard: QueryMaskGuard,
}

impl GuardedMask {
    pub fn new(mask: MaskGrid, guard: &QueryMaskGuard) -> Self {
        GuardedMask {
            mask,
            guard: guard.clone(),
        }
    }

    pub fn read(&self) -> Result<&MaskGrid> {
        self.guard.accesses.fetch_add(1, Ordering::SeqCst);
        if self.guard.locked {
            return Err(Error::QueryMaskAccess);
        }
        Ok(&self.mask)
    }
}

/// Episode handed to the fine-tuning phase: supports are open, the query
/// mask is behind a guard.
#[derive(Clone, Debug)]
pub struct GuardedEpisode {
    pub support: Vec<(ImageGrid, MaskGrid)>,
    pub query_image: ImageGrid,
    pub query_mask: GuardedMask,
    pub class_id: u32,
    pub domain_id: u32,
}

impl Episode {
    pub fn into_guarded(self, guard: &QueryMaskGuard) -> GuardedEpisode {
        GuardedEpisode {
            support: self.support,
            query_image: self.query_image,
            query_mask: GuardedMask::new(self.query_mask, guard),
            class_id: self.class_id,
            domain_id: self.domain_id,
        }
    }
}

// ---------------------------------------------------------------------------
// on-disk export / import (8-bit portable pixmaps)
// ---------------------------------------------------------------------------

fn write_ppm(path: &Path, image: &ImageGrid) -> Result<()> {
    let side = image.side();
    let mut buf = format!("P6\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                buf.push((image.pixels[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_pgm(path: &Path, mask: &MaskGrid) -> Result<()> {
    let side = mask.side();
    let mut buf = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            buf.push(mask.labels[[y, x]] * 255);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// 8-bit grayscale dump of a `[0, 1]` map (debug visualization).
pub fn write_gray_pgm(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            buf.push((map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_pnm_header(data: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| {
            Error::Checkpoint("invalid pnm header".into())
        })?);
    }
    if fields.len() < 4 || fields[0] != magic {
        return Err(Error::Checkpoint(format!("expected {magic} header")));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Checkpoint("bad pnm width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Checkpoint("bad pnm height".into()))?;
    Ok((w, h, pos + 1))
}

fn read_ppm(path: &Path) -> Result<ImageGrid> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, off) = read_pnm_header(&data, "P6")?;
    let mut pixels = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels[[c, y, x]] = f64::from(data[off + (y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    ImageGrid::new(pixels)
}

fn read_pgm(path: &Path) -> Result<MaskGrid> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, off) = read_pnm_header(&data, "P5")?;
    let labels = Array2::from_shape_fn((h, w), |(y, x)| u8::from(data[off + y * w + x] >= 128));
    MaskGrid::new(labels)
}

/// Write `scenes_per_class` scenes per class of `domain` under
/// `dir/domain<id>/`, with a plain-text manifest (seed, class, file names).
pub fn export_domain(
    dir: &Path,
    domain: &DomainSpec,
    scenes_per_class: usize,
    base_seed: u64,
    side: usize,
) -> Result<PathBuf> {
    let ddir = dir.join(format!("domain{}", domain.domain_id));
    fs::create_dir_all(&ddir)?;
    let mut manifest = String::new();
    for &class in &domain.class_set {
        for i in 0..scenes_per_class {
            let seed = mix_seed(base_seed, (u64::from(class) << 20) | i as u64);
            let (img, mask) = generate_scene(seed, domain, class, side)?;
            let img_name = format!("scene_{class:03}_{i:04}.ppm");
            let mask_name = format!("scene_{class:03}_{i:04}.pgm");
            write_ppm(&ddir.join(&img_name), &img)?;
            write_pgm(&ddir.join(&mask_name), &mask)?;
            let _ = writeln!(manifest, "{seed} {class} {img_name} {mask_name}");
        }
    }
    fs::write(ddir.join("manifest.txt"), manifest)?;
    Ok(ddir)
}

/// Scene pool loaded back from an exported directory.
#[derive(Clone, Debug)]
pub struct ExportedDomain {
    pub domain_id: u32,
    dir: PathBuf,
    by_class: BTreeMap<u32, Vec<(String, String)>>,
}

impl ExportedDomain {
    pub fn load(dir: &Path, domain_id: u32) -> Result<Self> {
        let manifest = dir.join("manifest.txt");
        if !manifest.exists() {
            return Err(Error::MissingArtifact(format!(
                "manifest {}",
                manifest.display()
            )));
        }
        let mut by_class: BTreeMap<u32, Vec<(String, String)>> = BTreeMap::new();
        for (lineno, line) in fs::read_to_string(&manifest)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Config {
                    line: lineno + 1,
                    msg: "manifest line must be: seed class image mask".into(),
                });
            }
            let class: u32 = parts[1].parse().map_err(|_| Error::Config {
                line: lineno + 1,
                msg: "bad class id in manifest".into(),
            })?;
            by_class
                .entry(class)
                .or_default()
                .push((parts[2].to_string(), parts[3].to_string()));
        }
        Ok(ExportedDomain {
            domain_id,
            dir: dir.to_path_buf(),
            by_class,
        })
    }

    pub fn classes(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    fn load_scene(&self, class: u32, idx: usize) -> Result<(ImageGrid, MaskGrid)> {
        let (img, mask) = &self.by_class[&class][idx];
        Ok((read_ppm(&self.dir.join(img))?, read_pgm(&self.dir.join(mask))?))
    }
}

/// Either live procedural generation or a directory of exported scenes.
#[derive(Clone, Debug)]
pub enum SceneSource {
    Live(DomainSpec),
    Exported(ExportedDomain),
}

impl SceneSource {
    pub fn domain_id(&self) -> u32 {
        match self {
            SceneSource::Live(d) => d.domain_id,
            SceneSource::Exported(d) => d.domain_id,
        }
    }

    pub fn sample_episode(&self, rng_seed: u64, k_shots: usize, side: usize) -> Result<Episode> {
        match self {
            SceneSource::Live(d) => sample_episode(rng_seed, d, k_shots, side),
            SceneSource::Exported(d) => {
                if k_shots == 0 {
                    return Err(Error::Shape("k_shots must be >= 1".into()));
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, 0xd1f0 | u64::from(d.domain_id)));
                let classes = d.classes();
                let class = classes[rng.random_range(0..classes.len())];
                let pool = d.by_class[&class].len();
                if pool < k_shots + 1 {
                    return Err(Error::Shape(format!(
                        "class {class} has {pool} scenes, need {}",
                        k_shots + 1
                    )));
                }
                let mut idx: Vec<usize> = (0..pool).collect();
                idx.shuffle(&mut rng);
                let mut support = Vec::with_capacity(k_shots);
                for &i in idx.iter().take(k_shots) {
                    support.push(d.load_scene(class, i)?);
                }
                let (query_image, query_mask) = d.load_scene(class, idx[k_shots])?;
                Ok(Episode {
                    support,
                    query_image,
                    query_mask,
                    class_id: class,
                    domain_id: d.domain_id,
                })
            }
        }
    }
}

/// Deterministic stream of episode seeds.
pub fn episode_seed(base_seed: u64, epoch: usize, index: usize) -> u64 {
    mix_seed(base_seed, ((epoch as u64) << 32) | index as u64)
}
