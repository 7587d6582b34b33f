//! Synthetic two-class toy datasets with ground-truth masks.
//!
//! Every image has three features: a Gaussian-smoothed uniform noise
//! background, a dark rectangle or disc, and optionally a bright rectangle
//! painted inside the dark shape. Two class conventions are supported:
//! [`Convention::Set1`] splits by presence of the bright rectangle,
//! [`Convention::Set2`] by the dark shape's geometry (disc = class 1).
//!
//! A sample is a pure function of `(SynthParams, sub_seed, LabelRequest)`.
//! Masks are written next to the images for evaluation only; the training
//! loader ([`load_labeled_split`]) never reads them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{self, Mask};
use crate::tensor::{Element, Tensor};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

const SHAPE_ATTEMPTS: usize = 64;
const RECT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub image_size: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    pub blur_sigma: f64,
    pub shape_intensity: f64,
    pub rect_intensity: f64,
    /// Side (rectangle) or diameter (disc) of the dark shape, as a fraction of the image side.
    pub shape_size_range: (f64, f64),
    /// Side lengths of the bright rectangle, as fractions of the image side.
    pub rect_size_range: (f64, f64),
    pub margin: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            noise_low: 0.35,
            noise_high: 0.65,
            blur_sigma: 2.0,
            shape_intensity: 0.12,
            rect_intensity: 0.95,
            shape_size_range: (0.3, 0.6),
            rect_size_range: (0.1, 0.25),
            margin: 2,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synth params: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.noise_low) || !(0.0..=1.0).contains(&self.noise_high) {
            return bad("noise bounds must lie in [0, 1]");
        }
        if self.noise_low >= self.noise_high {
            return bad("noise_low must be below noise_high");
        }
        if !(self.rect_intensity > self.noise_high && self.noise_high > self.shape_intensity) {
            return bad("need rect_intensity > noise_high > shape_intensity");
        }
        if !(0.0..=1.0).contains(&self.rect_intensity) || !(0.0..=1.0).contains(&self.shape_intensity)
        {
            return bad("intensities must lie in [0, 1]");
        }
        if self.blur_sigma < 0.0 || !self.blur_sigma.is_finite() {
            return bad("blur_sigma must be finite and non-negative");
        }
        for (name, (lo, hi)) in [
            ("shape_size_range", self.shape_size_range),
            ("rect_size_range", self.rect_size_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!(
                    "synth params: {name} must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        if self.rect_size_range.1 >= self.shape_size_range.0 {
            return bad("largest bright rectangle must be smaller than the smallest dark shape");
        }
        let side = self.image_size as f64;
        if side * self.shape_size_range.1 + 2.0 * self.margin as f64 > side {
            return bad("largest dark shape does not fit within the margins");
        }
        Ok(())
    }
}

/// Which labels to force when generating a sample; `None` draws it from the sub-seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelRequest {
    pub rect_present: Option<bool>,
    pub circle: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    Set1,
    Set2,
}

impl Convention {
    pub fn from_set_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Convention::Set1),
            2 => Ok(Convention::Set2),
            _ => Err(Error::config(format!("class convention must be 1 or 2, got {n}"))),
        }
    }

    pub fn request_for(self, class: u8) -> LabelRequest {
        match self {
            Convention::Set1 => LabelRequest {
                rect_present: Some(class == 1),
                circle: None,
            },
            Convention::Set2 => LabelRequest {
                rect_present: None,
                circle: Some(class == 1),
            },
        }
    }

    pub fn label_of(self, label_set1: u8, label_set2: u8) -> u8 {
        match self {
            Convention::Set1 => label_set1,
            Convention::Set2 => label_set2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// 1×H×W in [-1, 1].
    pub image: Tensor<f32>,
    /// 1 when the bright rectangle is present.
    pub label_set1: u8,
    /// 1 when the dark shape is a disc.
    pub label_set2: u8,
    pub mask_rect: Mask,
    pub mask_shape: Mask,
    pub sub_seed: u64,
}

impl SynthSample {
    pub fn to_u8(&self) -> Vec<u8> {
        self.image
            .data()
            .iter()
            .map(|&v| imaging::signed_to_u8(v as f64))
            .collect()
    }
}

/// SplitMix64 finaliser; used to derive independent per-sample seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(global_seed: u64, index: u64) -> u64 {
    mix64(global_seed ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur, kernel radius ⌈3σ⌉, reflect padding (edge not repeated).
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return img.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * img[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum DarkShape {
    Rect { x0: f64, y0: f64, side: f64 },
    Disc { cx: f64, cy: f64, radius: f64 },
}

impl DarkShape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            DarkShape::Rect { x0, y0, side } => {
                px >= x0 && px < x0 + side && py >= y0 && py < y0 + side
            }
            DarkShape::Disc { cx, cy, radius } => {
                (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64) {
        match *self {
            DarkShape::Rect { x0, y0, side } => (x0, y0, side),
            DarkShape::Disc { cx, cy, radius } => (cx - radius, cy - radius, 2.0 * radius),
        }
    }
}

fn raster(size: usize, inside: impl Fn(f64, f64) -> bool) -> Mask {
    let mut m = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            // pixel centres
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Every rect pixel and its 4-neighbours lie inside the shape.
fn strictly_inside(rect: &Mask, shape: &Mask) -> bool {
    let (h, w) = (rect.height(), rect.width());
    for y in 0..h {
        for x in 0..w {
            if !rect.get(y, x) {
                continue;
            }
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                return false;
            }
            let neighbours = [(y, x), (y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
            if neighbours.iter().any(|&(ny, nx)| !shape.get(ny, nx)) {
                return false;
            }
        }
    }
    true
}

/// Generates one sample. Deterministic in `(params, sub_seed, request)`.
pub fn gen_sample(params: &SynthParams, sub_seed: u64, request: LabelRequest) -> Result<SynthSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let n = params.image_size;
    let side = n as f64;

    let noise: Vec<f64> = (0..n * n)
        .map(|_| rng.random_range(params.noise_low..params.noise_high))
        .collect();
    let mut pixels = gaussian_blur(&noise, n, n, params.blur_sigma);

    let circle = request.circle.unwrap_or_else(|| rng.random_bool(0.5));
    let rect_present = request.rect_present.unwrap_or_else(|| rng.random_bool(0.5));

    let margin = params.margin as f64;
    let mut placed = None;
    'shapes: for _ in 0..SHAPE_ATTEMPTS {
        let size = side * rng.random_range(params.shape_size_range.0..=params.shape_size_range.1);
        let x0 = rng.random_range(margin..=side - margin - size);
        let y0 = rng.random_range(margin..=side - margin - size);
        let shape = if circle {
            DarkShape::Disc {
                cx: x0 + size / 2.0,
                cy: y0 + size / 2.0,
                radius: size / 2.0,
            }
        } else {
            DarkShape::Rect { x0, y0, side: size }
        };
        let shape_mask = raster(n, |px, py| shape.contains(px, py));
        if shape_mask.is_empty() {
            continue;
        }
        if !rect_present {
            placed = Some((shape_mask, Mask::new(n, n)));
            break;
        }
        let (bx, by, bside) = shape.bbox();
        for _ in 0..RECT_ATTEMPTS {
            let rw = side * rng.random_range(params.rect_size_range.0..=params.rect_size_range.1);
            let rh = side * rng.random_range(params.rect_size_range.0..=params.rect_size_range.1);
            if rw >= bside || rh >= bside {
                continue;
            }
            let rx = rng.random_range(bx..bx + bside - rw);
            let ry = rng.random_range(by..by + bside - rh);
            let rect_mask = raster(n, |px, py| px >= rx && px < rx + rw && py >= ry && py < ry + rh);
            if !rect_mask.is_empty() && strictly_inside(&rect_mask, &shape_mask) {
                placed = Some((shape_mask, rect_mask));
                break 'shapes;
            }
        }
    }
    let (mask_shape, mask_rect) = placed.ok_or_else(|| Error::SamplingExhausted {
        attempts: SHAPE_ATTEMPTS * RECT_ATTEMPTS,
        what: "bright rectangle inside dark shape".into(),
    })?;

    for (i, p) in pixels.iter_mut().enumerate() {
        if mask_rect.bits()[i] {
            *p = params.rect_intensity;
        } else if mask_shape.bits()[i] {
            *p = params.shape_intensity;
        }
    }
    let image = Tensor::from_vec(
        &[1, n, n],
        pixels.iter().map(|&v| (2.0 * v - 1.0) as f32).collect(),
    )?;
    Ok(SynthSample {
        image,
        label_set1: u8::from(rect_present),
        label_set2: u8::from(circle),
        mask_rect,
        mask_shape,
        sub_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRequest {
    pub root: PathBuf,
    pub seed: u64,
    pub convention: Convention,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub params: SynthParams,
    #[serde(default)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub class: u8,
    pub label_set1: u8,
    pub label_set2: u8,
    pub sub_seed: u64,
    pub mask_rect: String,
    pub mask_shape: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub convention: Convention,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub params: SynthParams,
    pub files: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.files.iter().filter(move |e| e.split == split)
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.files.iter().filter(|e| e.class == class).count()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("manifest serialisation: {e}")))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Self =
            toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!(
                    "manifest format version {} (expected {MANIFEST_VERSION})",
                    manifest.format_version
                ),
            ));
        }
        Ok(manifest)
    }

    /// SHA-256 of the serialised manifest, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path)
        .map(|mut it| it.next().is_some())
        .unwrap_or(false)
}

/// Generates a dataset on disk: `<root>/<split>/<class>/img_*.png`, masks under
/// `<root>/masks/`, and the manifest (written last).
pub fn build_dataset(req: &DatasetRequest) -> Result<DatasetManifest> {
    req.params.validate()?;
    if req.n_train_per_class == 0 {
        return Err(Error::config("n_train per class must be at least 1"));
    }
    if is_nonempty_dir(&req.root) {
        if !req.overwrite {
            return Err(Error::DirectoryNotEmpty {
                path: req.root.clone(),
            });
        }
        fs::remove_dir_all(&req.root).map_err(|e| Error::io(&req.root, e))?;
    }
    fs::create_dir_all(&req.root).map_err(|e| Error::io(&req.root, e))?;

    let n = req.params.image_size;
    let mut files = Vec::new();
    let mut index = 0u64;
    for (split, per_class) in [
        (Split::Train, req.n_train_per_class),
        (Split::Test, req.n_test_per_class),
    ] {
        for _ in 0..per_class {
            for class in 0..2u8 {
                let seed = sub_seed(req.seed, index);
                let sample = gen_sample(&req.params, seed, req.convention.request_for(class))?;
                let stem = format!("img_{index:06}");
                let rel = format!("{}/{class}/{stem}.png", split.dir_name());
                let rel_rect = format!("masks/{}/{class}/{stem}_rect.png", split.dir_name());
                let rel_shape = format!("masks/{}/{class}/{stem}_shape.png", split.dir_name());
                imaging::write_gray_png(&req.root.join(&rel), n, n, &sample.to_u8())?;
                imaging::write_gray_png(&req.root.join(&rel_rect), n, n, &sample.mask_rect.to_u8())?;
                imaging::write_gray_png(
                    &req.root.join(&rel_shape),
                    n,
                    n,
                    &sample.mask_shape.to_u8(),
                )?;
                debug_assert_eq!(
                    req.convention.label_of(sample.label_set1, sample.label_set2),
                    class
                );
                files.push(ManifestEntry {
                    path: rel,
                    split,
                    class,
                    label_set1: sample.label_set1,
                    label_set2: sample.label_set2,
                    sub_seed: seed,
                    mask_rect: rel_rect,
                    mask_shape: rel_shape,
                });
                index += 1;
            }
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        convention: req.convention,
        seed: req.seed,
        train_per_class: req.n_train_per_class,
        test_per_class: req.n_test_per_class,
        params: req.params.clone(),
        files,
    };
    let path = req.root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// What the training loop sees: an image and its class, nothing else.
#[derive(Debug, Clone)]
pub struct LabeledImage<T: Element> {
    pub image: Tensor<T>,
    pub label: u8,
}

/// Evaluation view of a sample, including both ground-truth masks.
#[derive(Debug, Clone)]
pub struct EvalImage<T: Element> {
    pub image: Tensor<T>,
    pub label: u8,
    pub mask_rect: Mask,
    pub mask_shape: Mask,
}

fn check_image<T: Element>(path: &Path, img: &Tensor<T>, size: usize) -> Result<()> {
    if img.shape() != [1, size, size] {
        return Err(Error::format(
            path,
            format!("image shape {:?}, manifest says {size}x{size}", img.shape()),
        ));
    }
    Ok(())
}

pub fn load_labeled_split<T: Element>(root: &Path, split: Split) -> Result<Vec<LabeledImage<T>>> {
    let manifest = DatasetManifest::load(root)?;
    manifest
        .entries(split)
        .map(|e| {
            let path = root.join(&e.path);
            let image = imaging::load_image(&path)?;
            check_image(&path, &image, manifest.params.image_size)?;
            Ok(LabeledImage {
                image,
                label: e.class,
            })
        })
        .collect()
}

pub fn load_eval_split<T: Element>(root: &Path, split: Split) -> Result<Vec<EvalImage<T>>> {
    let manifest = DatasetManifest::load(root)?;
    let n = manifest.params.image_size;
    let load_mask = |rel: &str| -> Result<Mask> {
        let (h, w, px) = imaging::read_gray_png(&root.join(rel))?;
        Mask::from_u8(h, w, &px)
    };
    manifest
        .entries(split)
        .map(|e| {
            let path = root.join(&e.path);
            let image = imaging::load_image(&path)?;
            check_image(&path, &image, n)?;
            Ok(EvalImage {
                image,
                label: e.class,
                mask_rect: load_mask(&e.mask_rect)?,
                mask_shape: load_mask(&e.mask_shape)?,
            })
        })
        .collect()
}
