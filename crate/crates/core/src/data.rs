//! Folder-per-class image ingestion: indexing with a stratified train/val
//! split, decoding, augmentation, normalization, batching, and a synthetic
//! class-separable dataset generator for tests and smoke runs.
//!
//! The mandatory decoder is binary PPM (P6), which is bit-exact and
//! dependency-free. PNG/JPEG support sits behind the `image-codecs` feature
//! as an adapter with the same contract.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no class subdirectories found under {0}")]
    NoClasses(PathBuf),
    #[error("class '{0}' contains no decodable images")]
    EmptyClass(String),
    #[error("undecodable image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },
    #[error("split '{0:?}' is empty")]
    EmptySplit(Split),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(format!("unknown split '{other}' (expected train|val)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

/// Labeled image-path catalog with per-class 80/20 split assignments.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub val_fraction: f64,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

/// Scan a directory-per-class tree and assign a deterministic stratified
/// train/val split: classes sorted lexicographically, per-class shuffle by
/// seed, then a floor(val_fraction * n) cut into validation.
pub fn build_index(root: &Path, val_fraction: f64, seed: u64) -> Result<DatasetIndex, DataError> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let class_name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && has_supported_extension(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::EmptyClass(class_name));
        }
        // cheap decodability check: PPM headers are sniffed now, adapter
        // formats fail at load time instead
        for f in &files {
            if f.extension().is_some_and(|e| e == "ppm") {
                sniff_ppm_header(f)?;
            }
        }
        let mut order: Vec<usize> = (0..files.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9E3779B97F4A7C15));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let val_count = (val_fraction * files.len() as f64).floor() as usize;
        classes.push(class_name);
        for (rank, &fi) in order.iter().enumerate() {
            samples.push(Sample {
                path: files[fi].clone(),
                class_id,
                split: if rank < val_count { Split::Val } else { Split::Train },
            });
        }
    }
    Ok(DatasetIndex { classes, samples, seed, val_fraction })
}

fn has_supported_extension(p: &Path) -> bool {
    let Some(ext) = p.extension().and_then(|e| e.to_str()) else { return false };
    let ext = ext.to_ascii_lowercase();
    if ext == "ppm" {
        return true;
    }
    cfg!(feature = "image-codecs") && matches!(ext.as_str(), "png" | "jpg" | "jpeg" | "bmp")
}

fn sniff_ppm_header(path: &Path) -> Result<(), DataError> {
    let mut buf = [0u8; 2];
    let mut f = fs::File::open(path)?;
    use std::io::Read;
    f.read_exact(&mut buf).map_err(|e| DataError::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if &buf != b"P6" {
        return Err(DataError::UndecodableImage {
            path: path.to_path_buf(),
            reason: "not a binary PPM (missing P6 magic)".into(),
        });
    }
    Ok(())
}

/// 8-bit RGB image, interleaved rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height * 3] }
    }
}

/// Serialize as binary PPM (P6, maxval 255). Byte-exact for round-trips.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage, DataError> {
    let undec = |reason: &str| DataError::UndecodableImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String, DataError> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(DataError::UndecodableImage {
                path: path.to_path_buf(),
                reason: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(undec("missing P6 magic"));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| undec("bad width"))?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| undec("bad height"))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| undec("bad maxval"))?;
    if maxval != 255 {
        return Err(undec("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(undec("truncated pixel data"));
    }
    Ok(RgbImage { width, height, pixels: bytes[pos..pos + need].to_vec() })
}

/// Decode any supported image file into 8-bit RGB.
pub fn decode_image(path: &Path) -> Result<RgbImage, DataError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, path);
    }
    #[cfg(feature = "image-codecs")]
    {
        let img = image::load_from_memory(&bytes)
            .map_err(|e| DataError::UndecodableImage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        return Ok(RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        });
    }
    #[cfg(not(feature = "image-codecs"))]
    Err(DataError::UndecodableImage {
        path: path.to_path_buf(),
        reason: "unsupported format (PPM only; enable the image-codecs feature)".into(),
    })
}

/// The universally used ImageNet channel statistics.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    pub rotation_degrees: f64,
    pub jitter: JitterSpec,
    pub resize: (usize, usize),
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl AugmentSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            hflip_prob: 0.5,
            rotation_degrees: 15.0,
            jitter: JitterSpec {
                brightness: (0.8, 1.2),
                contrast: (0.8, 1.2),
                saturation: (0.8, 1.2),
            },
            resize: (resolution, resolution),
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
        }
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::with_resolution(224)
    }
}

/// Planar f32 image in [0, 255], channel-major `[3,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PlanarImage {
    fn from_rgb(img: &RgbImage) -> Self {
        let (h, w) = (img.height, img.width);
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] = img.pixels[(y * w + x) * 3 + c] as f32;
                }
            }
        }
        Self { height: h, width: w, data }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// Bilinear sample; coordinates outside the image read as 0 (black).
    fn sample(&self, c: usize, y: f32, x: f32) -> f32 {
        let (h, w) = (self.height as isize, self.width as isize);
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let mut acc = 0.0f32;
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let yy = y0 as isize + dy;
                let xx = x0 as isize + dx;
                let v = if yy < 0 || xx < 0 || yy >= h || xx >= w {
                    0.0
                } else {
                    self.at(c, yy as usize, xx as usize)
                };
                acc += v * wy * wx;
            }
        }
        acc
    }
}

pub fn resize_bilinear(img: &PlanarImage, out_h: usize, out_w: usize) -> PlanarImage {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    let sy = img.height as f32 / out_h as f32;
    let sx = img.width as f32 / out_w as f32;
    let mut out = PlanarImage { height: out_h, width: out_w, data: vec![0.0; 3 * out_h * out_w] };
    for c in 0..3 {
        for y in 0..out_h {
            let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, img.height as f32 - 1.0);
            for x in 0..out_w {
                let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, img.width as f32 - 1.0);
                out.data[c * out_h * out_w + y * out_w + x] = img.sample(c, src_y, src_x);
            }
        }
    }
    out
}

pub fn hflip(img: &PlanarImage) -> PlanarImage {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] = img.at(c, y, w - 1 - x);
            }
        }
    }
    out
}

/// Rotate about the image center; exposed corners fill with black.
pub fn rotate_bilinear(img: &PlanarImage, degrees: f32) -> PlanarImage {
    let (h, w) = (img.height, img.width);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = PlanarImage { height: h, width: w, data: vec![0.0; 3 * h * w] };
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                // inverse mapping into the source
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                if sy < -0.5 || sx < -0.5 || sy > h as f32 - 0.5 || sx > w as f32 - 0.5 {
                    continue;
                }
                out.data[c * h * w + y * w + x] = img.sample(c, sy, sx);
            }
        }
    }
    out
}

fn apply_jitter(img: &mut PlanarImage, brightness: f32, contrast: f32, saturation: f32) {
    let plane = img.height * img.width;
    // brightness: plain scaling
    for v in &mut img.data {
        *v = (*v * brightness).clamp(0.0, 255.0);
    }
    // contrast: blend toward the image's gray mean
    let mean: f32 = img.data.iter().sum::<f32>() / img.data.len() as f32;
    for v in &mut img.data {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 255.0);
    }
    // saturation: blend toward the per-pixel luma
    for i in 0..plane {
        let (r, g, b) = (img.data[i], img.data[plane + i], img.data[2 * plane + i]);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        img.data[i] = (luma + (r - luma) * saturation).clamp(0.0, 255.0);
        img.data[plane + i] = (luma + (g - luma) * saturation).clamp(0.0, 255.0);
        img.data[2 * plane + i] = (luma + (b - luma) * saturation).clamp(0.0, 255.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    Train,
    Eval,
}

/// Decode, resize, (train-mode) augment, scale to [0,1], and normalize into a
/// `[3,H,W]` tensor. Eval mode touches no randomness and is bitwise
/// reproducible.
pub fn load_and_transform(
    path: &Path,
    spec: &AugmentSpec,
    mode: TransformMode,
    rng: &mut dyn RngCore,
) -> Result<Tensor<f32>, DataError> {
    let img = decode_image(path)?;
    transform_image(&img, spec, mode, rng)
}

pub fn transform_image(
    img: &RgbImage,
    spec: &AugmentSpec,
    mode: TransformMode,
    rng: &mut dyn RngCore,
) -> Result<Tensor<f32>, DataError> {
    let mut planar = resize_bilinear(&PlanarImage::from_rgb(img), spec.resize.0, spec.resize.1);
    if mode == TransformMode::Train {
        if rng.gen::<f64>() < spec.hflip_prob {
            planar = hflip(&planar);
        }
        if spec.rotation_degrees > 0.0 {
            let deg = rng.gen_range(-spec.rotation_degrees..=spec.rotation_degrees) as f32;
            planar = rotate_bilinear(&planar, deg);
        }
        let b = rng.gen_range(spec.jitter.brightness.0..=spec.jitter.brightness.1) as f32;
        let c = rng.gen_range(spec.jitter.contrast.0..=spec.jitter.contrast.1) as f32;
        let s = rng.gen_range(spec.jitter.saturation.0..=spec.jitter.saturation.1) as f32;
        apply_jitter(&mut planar, b, c, s);
    }
    let (h, w) = (planar.height, planar.width);
    let mut data = planar.data;
    for ch in 0..3 {
        let mean = spec.normalize_mean[ch] as f32;
        let std = spec.normalize_std[ch] as f32;
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v = (*v / 255.0 - mean) / std;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("planar buffer matches shape"))
}

/// Invert the final normalization, back to [0,1] scale.
pub fn denormalize(t: &Tensor<f32>, spec: &AugmentSpec) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut data = t.data().to_vec();
    for ch in 0..3 {
        let mean = spec.normalize_mean[ch] as f32;
        let std = spec.normalize_std[ch] as f32;
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v = *v * std + mean;
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Indices into `DatasetIndex::samples`.
    pub sample_indices: Vec<usize>,
}

/// Deterministic batch stream over one split. The shuffle order is a pure
/// function of (seed, epoch); the last batch may be short.
pub fn batches(
    index: &DatasetIndex,
    split: Split,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    spec: &AugmentSpec,
    mode: TransformMode,
) -> Result<Vec<Result<Batch, DataError>>, DataError> {
    let mut order = index.split_indices(split);
    if order.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x517CC1B727220A95));
    if shuffle {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    let (h, w) = spec.resize;
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut images = Tensor::zeros(&[chunk.len(), 3, h, w]);
        let mut labels = Vec::with_capacity(chunk.len());
        let mut failed = None;
        for (bi, &si) in chunk.iter().enumerate() {
            let sample = &index.samples[si];
            match load_and_transform(&sample.path, spec, mode, &mut rng) {
                Ok(t) => {
                    let plane = 3 * h * w;
                    images.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(t.data());
                    labels.push(sample.class_id);
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        out.push(match failed {
            Some(e) => Err(e),
            None => Ok(Batch { images, labels, sample_indices: chunk.to_vec() }),
        });
    }
    Ok(out)
}

/// Emit a deterministic folder-per-class P6 PPM tree. Each class gets a
/// distinct base color and stripe texture plus pixel noise, so mean color
/// alone separates the classes.
pub fn gen_synthetic(
    root: &Path,
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..num_classes {
        let dir = root.join(format!("class_{class:02}"));
        fs::create_dir_all(&dir)?;
        let hue = class as f64 / num_classes as f64;
        let base = hsv_to_rgb(hue, 0.75, 0.85);
        let stripe_period = 4 + class * 3;
        for i in 0..per_class {
            let mut img = RgbImage::new(image_size, image_size);
            for y in 0..image_size {
                for x in 0..image_size {
                    let stripe = if ((x + 2 * y) / stripe_period) % 2 == 0 { 1.0 } else { 0.72 };
                    for c in 0..3 {
                        let noise: f64 = rng.gen_range(-18.0..=18.0);
                        let v = base[c] * stripe + noise;
                        img.pixels[(y * image_size + x) * 3 + c] = v.clamp(0.0, 255.0) as u8;
                    }
                }
            }
            let mut f = fs::File::create(dir.join(format!("img_{i:04}.ppm")))?;
            f.write_all(&encode_ppm(&img))?;
        }
    }
    Ok(())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).abs();
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}
