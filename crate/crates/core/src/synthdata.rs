//! Procedural multi-domain segmentation world and dataset storage.
//!
//! A scene layout depends only on the layout seed and the image index, so
//! every domain rendered from the same seed shares its label maps exactly.
//! Domains differ in palette, texture and illumination only.
//!
//! Default classes: 0 background, 1 road, 2 sky, 3 building, then object
//! classes cycling through vehicle (on the road), pole, sign and marker
//! shapes (on background), in decreasing pixel share.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{check_labels, IGNORE_LABEL};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const SKY: u8 = 2;
pub const BUILDING: u8 = 3;
pub const FIRST_OBJECT: u8 = 4;

/// Style attributes and class balance of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Base RGB colour per class, each channel in `[0, 1]`.
    pub palette: Vec<[f64; 3]>,
    pub texture_amplitude: f64,
    /// Noise lattice cells across the image.
    pub texture_frequency: f64,
    pub gain: f64,
    pub bias: f64,
    pub class_frequency: Vec<f64>,
    pub image_size: usize,
    pub num_classes: usize,
}

impl DomainSpec {
    /// The eight-class source world at the given resolution.
    pub fn default_world(image_size: usize) -> Self {
        Self {
            name: "source".into(),
            palette: vec![
                [0.45, 0.62, 0.35],
                [0.38, 0.36, 0.40],
                [0.52, 0.72, 0.92],
                [0.66, 0.44, 0.32],
                [0.86, 0.16, 0.14],
                [0.92, 0.82, 0.22],
                [0.18, 0.30, 0.80],
                [0.88, 0.40, 0.78],
            ],
            texture_amplitude: 0.12,
            texture_frequency: 6.0,
            gain: 1.0,
            bias: 0.0,
            class_frequency: vec![0.22, 0.30, 0.22, 0.15, 0.05, 0.03, 0.02, 0.01],
            image_size,
            num_classes: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if !(4..=254).contains(&k) {
            return Err(Error::Config(format!("the world needs 4..=254 classes, got {k}")));
        }
        if self.palette.len() != k || self.class_frequency.len() != k {
            return Err(Error::Config(format!(
                "palette ({}) and class_frequency ({}) must list {k} classes",
                self.palette.len(),
                self.class_frequency.len()
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} below 16", self.image_size)));
        }
        let total: f64 = self.class_frequency.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.class_frequency.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config(format!(
                "class frequencies must be positive and sum to 1 (sum {total})"
            )));
        }
        let pixels = (self.image_size * self.image_size) as f64;
        for (c, &f) in self.class_frequency.iter().enumerate().skip(FIRST_OBJECT as usize) {
            let min_area = min_shape_area(shape_kind(c as u8), self.image_size);
            if f * pixels < min_area {
                return Err(Error::Config(format!(
                    "class {c} share {f} covers {:.1} pixels, below one shape ({min_area:.1})",
                    f * pixels
                )));
            }
        }
        let fixed: f64 = self.class_frequency[..FIRST_OBJECT as usize].iter().sum();
        if self.class_frequency[SKY as usize] + self.class_frequency[ROAD as usize] > 0.8 || fixed < 0.5 {
            return Err(Error::Config("band and background shares leave no room for the scene".into()));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("palette colours must lie in [0, 1]".into()));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_frequency > 0.0 && self.gain > 0.0) {
            return Err(Error::Config("texture and illumination must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Vehicle,
    Pole,
    Sign,
    Marker,
}

fn shape_kind(class: u8) -> ShapeKind {
    match (class - FIRST_OBJECT) % 4 {
        0 => ShapeKind::Vehicle,
        1 => ShapeKind::Pole,
        2 => ShapeKind::Sign,
        _ => ShapeKind::Marker,
    }
}

fn min_shape_area(kind: ShapeKind, size: usize) -> f64 {
    let s = size as f64;
    match kind {
        ShapeKind::Vehicle => (0.10 * s).max(2.0) * (0.06 * s).max(2.0),
        ShapeKind::Pole => (0.25 * s).max(3.0),
        ShapeKind::Sign => 5.0,
        ShapeKind::Marker => 5.0,
    }
}

/// One labelled image. `image` is `(1, 3, H, W)` with 8-bit quantized values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
    /// Free-form provenance written to the `meta` file.
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples into `(B, 3, H, W)` images and flat labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let images: Vec<Tensor<f32>> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        let labels = indices.iter().flat_map(|&i| self.samples[i].label.iter().copied()).collect();
        Ok((Tensor::stack_batch(&images)?, labels))
    }

    pub fn images(&self) -> Vec<Tensor<f32>> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    /// Pixel share per class over all labelled pixels.
    pub fn class_shares(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        let mut total = 0usize;
        for s in &self.samples {
            for &l in &s.label {
                if l != IGNORE_LABEL {
                    counts[l as usize] += 1;
                    total += 1;
                }
            }
        }
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }
}

fn mix_seed(seed: u64, index: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Layout {
    size: usize,
    label: Vec<u8>,
}

impl Layout {
    fn at(&self, x: usize, y: usize) -> u8 {
        self.label[y * self.size + x]
    }
}

fn wavy_edge(rng: &mut ChaCha8Rng, size: usize, mean: f64, amplitude: f64) -> Vec<f64> {
    let period = rng.random_range(0.6..1.6) * size as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..size)
        .map(|x| mean + amplitude * (std::f64::consts::TAU * x as f64 / period + phase).sin())
        .collect()
}

fn layout(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Layout {
    let s = spec.image_size;
    let sf = s as f64;
    let f = &spec.class_frequency;
    let objects_on_road: f64 = (FIRST_OBJECT as usize..spec.num_classes)
        .filter(|&c| shape_kind(c as u8) == ShapeKind::Vehicle)
        .map(|c| f[c])
        .sum();
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.9..1.1);
    let sky_rows = f[SKY as usize] * sf * jitter(rng);
    let sky = wavy_edge(rng, s, sky_rows, 0.04 * sf);
    let road_rows = (f[ROAD as usize] + objects_on_road) * sf * jitter(rng);
    let road = wavy_edge(rng, s, sf - road_rows, 0.03 * sf);
    let mut label = vec![BACKGROUND; s * s];
    for x in 0..s {
        for y in 0..s {
            let yf = y as f64 + 0.5;
            label[y * s + x] = if yf < sky[x] {
                SKY
            } else if yf >= road[x] {
                ROAD
            } else {
                BACKGROUND
            };
        }
    }
    let mut lay = Layout { size: s, label };

    // buildings stand on the road edge, left to right with random gaps
    let target = f[BUILDING as usize] * sf * sf;
    let mut painted = 0.0;
    let mut x0 = rng.random_range(0..(s / 4).max(1));
    let mut passes = 0;
    while painted < target && passes < 3 {
        let width = rng.random_range((0.10 * sf).max(2.0)..(0.25 * sf).max(3.0)) as usize;
        let rel_height = rng.random_range(0.45..0.95);
        for x in x0..(x0 + width).min(s) {
            let base = road[x].floor().max(0.0) as usize;
            let top_limit = sky[x].ceil().max(0.0) as usize;
            let h = ((base.saturating_sub(top_limit)) as f64 * rel_height) as usize;
            for y in base.saturating_sub(h)..base.min(s) {
                if lay.label[y * s + x] == BACKGROUND && painted < target {
                    lay.label[y * s + x] = BUILDING;
                    painted += 1.0;
                }
            }
        }
        x0 += width + rng.random_range(1..(0.15 * sf).max(2.0) as usize + 1);
        if x0 >= s {
            x0 = rng.random_range(0..(s / 4).max(1));
            passes += 1;
        }
    }

    for class in FIRST_OBJECT..spec.num_classes as u8 {
        place_objects(&mut lay, class, f[class as usize] * sf * sf, rng);
    }
    lay
}

/// Pixels of one object shape anchored at `(cx, cy)`.
fn shape_pixels(kind: ShapeKind, size: usize, cx: i64, cy: i64, rng: &mut ChaCha8Rng) -> Vec<(i64, i64)> {
    let sf = size as f64;
    let mut px = Vec::new();
    match kind {
        ShapeKind::Vehicle => {
            let w = rng.random_range((0.10 * sf).max(2.0)..(0.18 * sf).max(3.0)).round() as i64;
            let h = (w as f64 * rng.random_range(0.5..0.7)).round().max(2.0) as i64;
            for dy in 0..h {
                for dx in 0..w {
                    px.push((cx + dx, cy + dy));
                }
            }
        }
        ShapeKind::Pole => {
            let w = (0.03 * sf).round().max(1.0) as i64;
            let h = rng.random_range((0.25 * sf).max(3.0)..(0.45 * sf).max(4.0)).round() as i64;
            for dy in 0..h {
                for dx in 0..w {
                    px.push((cx + dx, cy - dy));
                }
            }
        }
        ShapeKind::Sign => {
            let r = rng.random_range((0.035 * sf).max(1.3)..(0.06 * sf).max(1.6));
            let ri = r.ceil() as i64;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy) as f64) <= r * r {
                        px.push((cx + dx, cy + dy));
                    }
                }
            }
        }
        ShapeKind::Marker => {
            // upward triangle
            let h = rng.random_range((0.05 * sf).max(2.0)..(0.09 * sf).max(2.5)).round() as i64;
            for dy in 0..h {
                for dx in -dy..=dy {
                    px.push((cx + dx, cy + dy));
                }
            }
        }
    }
    px
}

fn place_objects(lay: &mut Layout, class: u8, target: f64, rng: &mut ChaCha8Rng) {
    let kind = shape_kind(class);
    let host = if kind == ShapeKind::Vehicle { ROAD } else { BACKGROUND };
    let s = lay.size as i64;
    let mut painted = 0.0;
    let mut attempts = 0;
    while painted < target && attempts < 400 {
        attempts += 1;
        let cx = rng.random_range(0..s);
        let cy = rng.random_range(0..s);
        let px = shape_pixels(kind, lay.size, cx, cy, rng);
        let area = px.len() as f64;
        // a shape overshooting by more than half its area is redrawn
        if painted > 0.0 && painted + area - target > 0.5 * area {
            continue;
        }
        let fits = px
            .iter()
            .all(|&(x, y)| x >= 0 && y >= 0 && x < s && y < s && lay.at(x as usize, y as usize) == host);
        if fits {
            for &(x, y) in &px {
                lay.label[(y * s + x) as usize] = class;
            }
            painted += area;
        }
    }
}

/// Smooth noise in `[-1, 1]` on a lattice with `cells` cells across.
fn value_noise(size: usize, cells: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cells.ceil() as usize + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scale = cells / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 * scale;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 * scale;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let v = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
            let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn render(spec: &DomainSpec, lay: &Layout, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = spec.image_size;
    let colors: Vec<[f64; 3]> = spec
        .palette
        .iter()
        .map(|c| {
            let j = rng.random_range(-0.04..0.04);
            [c[0] + j, c[1] + j, c[2] + j]
        })
        .collect();
    let noise = value_noise(s, spec.texture_frequency, rng);
    let grain: Vec<f64> = (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let window = (s / 16).max(2);
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = y * s + x;
            let class = lay.label[p];
            let mut shade = 1.0 + spec.texture_amplitude * (noise[p] + 0.35 * grain[p]);
            if class == BUILDING && (x % window) * 2 < window && (y % window) * 2 < window {
                shade *= 0.6;
            }
            if class == ROAD && y % window == 0 {
                shade *= 0.85;
            }
            for ch in 0..3 {
                let v = spec.gain * colors[class as usize][ch] * shade + spec.bias;
                data[ch * s * s + p] = quantize(v);
            }
        }
    }
    Tensor::new(vec![1, 3, s, s], data).expect("rendered image shape")
}

/// Renders `n` scenes; scene `i` uses layout seed `mix(seed, i)`.
pub fn generate_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("a domain needs at least one image".into()));
    }
    let samples = (0..n as u64)
        .map(|i| {
            let mut lrng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i, 1));
            let mut trng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i, 2));
            let lay = layout(spec, &mut lrng);
            let image = render(spec, &lay, &mut trng);
            Sample { image, label: lay.label }
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), seed.to_string());
    meta.insert("spec".into(), toml::to_string(spec).map(|t| t.replace('\n', "; ")).unwrap_or_default());
    Ok(Dataset {
        name: spec.name.clone(),
        num_classes: spec.num_classes,
        image_size: spec.image_size,
        samples,
        meta,
    })
}

/// Rotation of an RGB colour about the grey axis.
fn rotate_hue(c: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, co) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let dot = k * (c[0] + c[1] + c[2]);
    let cross = [k * (c[2] - c[1]), k * (c[0] - c[2]), k * (c[1] - c[0])];
    std::array::from_fn(|i| (c[i] * co + cross[i] * s + k * dot * (1.0 - co)).clamp(0.0, 1.0))
}

/// Target domain `index` (1-based) of `k` at the given shift strength.
pub fn shifted_spec(base: &DomainSpec, index: usize, k: usize, shift: f64) -> DomainSpec {
    let t = shift * index as f64 / k as f64;
    let mut spec = base.clone();
    spec.name = format!("target{index:02}");
    spec.palette = base
        .palette
        .iter()
        .map(|&c| rotate_hue(c, 0.9 * std::f64::consts::PI * t))
        .collect();
    spec.texture_amplitude = base.texture_amplitude + 0.15 * t;
    spec.texture_frequency = base.texture_frequency * (1.0 + t);
    spec.gain = base.gain * (1.0 - 0.3 * t);
    spec.bias = base.bias + 0.05 * t;
    spec
}

/// Layout seed of held-out evaluation scenes derived from a suite seed.
pub fn holdout_seed(seed: u64) -> u64 {
    mix_seed(seed, u64::MAX, 3)
}

/// Source training data plus `k_targets` progressively shifted domains.
/// Targets are rendered on held-out layouts ([`holdout_seed`]), so with zero
/// shift they equal the base domain rendered on those layouts.
pub fn make_shift_suite(
    base: &DomainSpec,
    k_targets: usize,
    shift_magnitude: f64,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> Result<(Dataset, Vec<Dataset>)> {
    if !(0.0..=1.0).contains(&shift_magnitude) {
        return Err(Error::Config(format!("shift magnitude {shift_magnitude} outside [0, 1]")));
    }
    let source = generate_domain(base, n_source, seed)?;
    let eval_seed = holdout_seed(seed);
    let targets = (1..=k_targets)
        .map(|j| generate_domain(&shifted_spec(base, j, k_targets, shift_magnitude), n_target, eval_seed))
        .collect::<Result<Vec<_>>>()?;
    info!("generated source ({n_source}) and {k_targets} targets ({n_target} each)");
    Ok((source, targets))
}

/// Textured colour fields: random smooth colour gradients overlaid with
/// oriented stripes, drawn from continuous colour distributions.
pub fn generate_style_pool(n: usize, image_size: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    if n == 0 || image_size == 0 {
        return Err(Error::Config("style pool needs images of non-zero size".into()));
    }
    let s = image_size;
    Ok((0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i, 4));
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let accent: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let field: Vec<Vec<f64>> = (0..3).map(|_| value_noise(s, rng.random_range(1.5..5.0), &mut rng)).collect();
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(2.0..12.0) / s as f64;
            let stripe_mix = rng.random_range(0.1..0.6);
            let contrast = rng.random_range(0.1..0.4);
            let (sa, ca) = angle.sin_cos();
            let mut data = vec![0f32; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let p = y * s + x;
                    let phase = std::f64::consts::TAU * freq * (x as f64 * ca + y as f64 * sa);
                    let stripe = 0.5 + 0.5 * phase.sin();
                    for ch in 0..3 {
                        let v = base[ch] * (1.0 - stripe_mix * stripe)
                            + accent[ch] * stripe_mix * stripe
                            + contrast * field[ch][p];
                        data[ch * s * s + p] = quantize(v);
                    }
                }
            }
            Tensor::new(vec![1, 3, s, s], data).expect("style image shape")
        })
        .collect())
}

fn to_rgb(image: &Tensor<f32>) -> Result<RgbImage> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::Shape("expected a 3-channel image".into()));
    }
    let plane = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (image.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(out)
}

fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("decoded image shape")
}

/// Writes an image tensor `(1, 3, H, W)` in `[0, 1]` as an 8-bit PNG.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    to_rgb(image)?
        .save(path)
        .map_err(|e| Error::ingest(path, e.to_string()))
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    Ok(from_rgb(&img.to_rgb8()))
}

fn numbered_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Writes `images/NNNNN.png`, `labels/NNNNN.png` and a `meta` file.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_png(&s.image, &images.join(&name))?;
        let size = ds.image_size as u32;
        let label = GrayImage::from_raw(size, size, s.label.clone())
            .ok_or_else(|| Error::Shape("label size does not match image size".into()))?;
        let path = labels.join(&name);
        label.save(&path).map_err(|e| Error::ingest(&path, e.to_string()))?;
    }
    let mut meta = format!(
        "name={}\nnum_classes={}\nimage_size={}\ncount={}\n",
        ds.name,
        ds.num_classes,
        ds.image_size,
        ds.len()
    );
    for (k, v) in &ds.meta {
        if !["name", "num_classes", "image_size", "count"].contains(&k.as_str()) {
            meta.push_str(&format!("{k}={}\n", v.replace('\n', " ")));
        }
    }
    let path = dir.join("meta");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ingest(path, format!("malformed line {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta");
    let mut meta = read_meta(&meta_path)?;
    let field = |meta: &BTreeMap<String, String>, key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::ingest(&meta_path, format!("missing or invalid {key}")))
    };
    let num_classes = field(&meta, "num_classes")?;
    let image_size = field(&meta, "image_size")?;
    let name = meta.get("name").cloned().unwrap_or_default();
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    let names = numbered_pngs(&images_dir)?;
    if names.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let mut samples = Vec::with_capacity(names.len());
    for name in &names {
        let ip = images_dir.join(name);
        let lp = labels_dir.join(name);
        if !lp.exists() {
            return Err(Error::ingest(&lp, "label file missing for image"));
        }
        let image = load_png(&ip)?;
        let (_, _, h, w) = image.dims4()?;
        if h != image_size || w != image_size {
            return Err(Error::ingest(&ip, format!("size {h}×{w}, expected {image_size}")));
        }
        let label = ImageReader::open(&lp)
            .map_err(|e| Error::io(&lp, e))?
            .decode()
            .map_err(|e| Error::ingest(&lp, e.to_string()))?;
        if label.width() as usize != w || label.height() as usize != h {
            return Err(Error::ingest(&lp, "label size differs from image size"));
        }
        let label = label.to_luma8().into_raw();
        check_labels(&label, num_classes).map_err(|e| Error::ingest(&lp, e.to_string()))?;
        samples.push(Sample { image, label });
    }
    for k in ["name", "num_classes", "image_size", "count"] {
        meta.remove(k);
    }
    Ok(Dataset {
        name,
        num_classes,
        image_size,
        samples,
        meta,
    })
}

/// Writes style images as `images/NNNNN.png`.
pub fn save_style_pool(images: &[Tensor<f32>], dir: &Path) -> Result<()> {
    let d = dir.join("images");
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    for (i, img) in images.iter().enumerate() {
        save_png(img, &d.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

pub fn load_style_pool(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let d = dir.join("images");
    let names = numbered_pngs(&d)?;
    if names.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    names.iter().map(|n| load_png(&d.join(n))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_labels_across_domains() {
        let base = DomainSpec::default_world(32);
        let a = generate_domain(&base, 4, 11).unwrap();
        let b = generate_domain(&shifted_spec(&base, 3, 4, 1.0), 4, 11).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_ne!(x.image, y.image);
        }
        assert_eq!(a, generate_domain(&base, 4, 11).unwrap());
    }

    #[test]
    fn infeasible_rare_share_is_a_config_error() {
        let mut spec = DomainSpec::default_world(32);
        spec.class_frequency = vec![0.2299, 0.30, 0.22, 0.15, 0.05, 0.03, 0.02, 0.0001];
        assert!(matches!(generate_domain(&spec, 1, 0), Err(Error::Config(_))));
        spec.class_frequency[7] = 0.0;
        spec.class_frequency[0] = 0.23;
        assert!(matches!(generate_domain(&spec, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shift_targets_match_base_rendering() {
        let base = DomainSpec::default_world(32);
        let (_, targets) = make_shift_suite(&base, 3, 0.0, 2, 3, 5).unwrap();
        let reference = generate_domain(&base, 3, holdout_seed(5)).unwrap();
        for t in &targets {
            for (x, y) in t.samples.iter().zip(&reference.samples) {
                assert_eq!(x.image, y.image);
            }
        }
    }

    #[test]
    fn hue_rotation_keeps_grey_and_full_turn() {
        let grey = [0.4, 0.4, 0.4];
        let r = rotate_hue(grey, 1.0);
        assert!(r.iter().all(|v| (v - 0.4).abs() < 1e-12));
        let c = [0.2, 0.5, 0.7];
        let back = rotate_hue(c, std::f64::consts::TAU);
        assert!(c.iter().zip(back).all(|(a, b)| (a - b).abs() < 1e-12));
        let third = rotate_hue([1.0, 0.0, 0.0], std::f64::consts::TAU / 3.0);
        assert!((third[1] - 1.0).abs() < 1e-9 && third[0].abs() < 1e-9);
    }
}
