//! Synthetic "small scattered lesion" images and dataset files.
//!
//! Each image has a smooth background, thin bright distractor strokes that
//! are not labeled, and 1 to 6 irregular blobs grown by random walks from
//! seed pixels. Blob contrast over the pixel noise is drawn per blob from a
//! low range so some blobs look like their surroundings.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PsgrError, Result};
use crate::pstn::{self, PstnData};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const MIN_BLOB_FRACTION: f64 = 0.002;
pub const MAX_BLOB_FRACTION: f64 = 0.05;
pub const MAX_BLOBS: usize = 6;
/// Blob contrast range in units of the pixel noise standard deviation.
pub const SNR_RANGE: (f64, f64) = (1.5, 4.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub class: u8,
    pub area: usize,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub blobs: Vec<BlobMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `h×w×1`, not normalized.
    pub image: Tensor<f32>,
    /// Row-major class labels.
    pub mask: Vec<u8>,
    pub meta: SampleMeta,
}

/// Images and masks of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        n_classes: usize,
        images: Vec<Tensor<f32>>,
        masks: Vec<Vec<u8>>,
    ) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(PsgrError::invalid("image and mask counts differ"));
        }
        for (img, m) in images.iter().zip(&masks) {
            if img.shape() != [height, width, 1] || m.len() != height * width {
                return Err(PsgrError::shape(
                    "dataset",
                    format!("sample {:?} does not match {height}x{width}", img.shape()),
                ));
            }
            if m.iter().any(|&l| l as usize >= n_classes) {
                return Err(PsgrError::invalid("mask label outside class range"));
            }
        }
        Ok(Self {
            height,
            width,
            n_classes,
            images,
            masks,
        })
    }

    pub fn from_samples(samples: Vec<SyntheticSample>, n_classes: usize) -> Result<Self> {
        let (h, w) = match samples.first() {
            Some(s) => (s.image.shape()[0], s.image.shape()[1]),
            None => (0, 0),
        };
        let (images, masks) = samples.into_iter().map(|s| (s.image, s.mask)).unzip();
        Self::new(h, w, n_classes, images, masks)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `n_tail` samples.
    pub fn split_tail(mut self, n_tail: usize) -> (Dataset, Dataset) {
        let at = self.len().saturating_sub(n_tail);
        let tail = Dataset {
            images: self.images.split_off(at),
            masks: self.masks.split_off(at),
            ..self.clone_header()
        };
        (self, tail)
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            images: Vec::new(),
            masks: Vec::new(),
        }
    }
}

/// Zero mean, unit variance. A constant image becomes all zeros.
pub fn normalize_image(data: &mut [f32]) {
    if data.is_empty() {
        return;
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in data.iter_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}

fn grow_blob(
    rng: &mut Rng,
    labels: &mut [u8],
    height: usize,
    width: usize,
    area: usize,
    class: u8,
) -> Vec<usize> {
    let free: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if free.is_empty() {
        return Vec::new();
    }
    let start = free[rng.below(free.len())];
    labels[start] = class;
    let mut pixels = vec![start];
    let mut attempts = 0;
    while pixels.len() < area && attempts < 200 * area {
        attempts += 1;
        let from = pixels[rng.below(pixels.len())];
        let (y, x) = (from / width, from % width);
        let next = match rng.below(4) {
            0 if y > 0 => from - width,
            1 if y + 1 < height => from + width,
            2 if x > 0 => from - 1,
            3 if x + 1 < width => from + 1,
            _ => continue,
        };
        if labels[next] == 0 {
            labels[next] = class;
            pixels.push(next);
        }
    }
    pixels
}

/// Separable box blur with clamped borders.
fn box_blur(data: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (pos, len) = if along_x { (x, width) } else { (y, height) };
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(len - 1);
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += if along_x { src[y * width + q] } else { src[q * width + x] };
                }
                out[y * width + x] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

fn sample(index: usize, height: usize, width: usize, n_classes: usize, seed: u64) -> SyntheticSample {
    let sample_seed = derive_seed(seed, &format!("sample/{index}"));
    let mut rng = Rng::new(sample_seed);
    let n = height * width;

    let mut labels = vec![0u8; n];
    let mut raise = vec![0.0; n];
    let n_blobs = 1 + rng.below(MAX_BLOBS);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let frac = rng.uniform_in(MIN_BLOB_FRACTION, MAX_BLOB_FRACTION);
        let area = ((frac * n as f64).round() as usize).max(1);
        let class = if n_classes > 2 {
            1 + rng.below(n_classes - 1) as u8
        } else {
            1
        };
        let pixels = grow_blob(&mut rng, &mut labels, height, width, area, class);
        if !pixels.is_empty() {
            let snr = rng.uniform_in(SNR_RANGE.0, SNR_RANGE.1);
            for &p in &pixels {
                raise[p] = snr;
            }
            blobs.push(BlobMeta {
                class,
                area: pixels.len(),
                snr,
            });
        }
    }

    // Smooth background field.
    let coarse: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut img: Vec<f64> = box_blur(&coarse, height, width, (height.min(width) / 8).max(1))
        .into_iter()
        .map(|v| 3.0 * v)
        .collect();

    // Unlabeled bright strokes: short random walks one pixel wide.
    let n_strokes = rng.below(4);
    for _ in 0..n_strokes {
        let contrast = rng.uniform_in(SNR_RANGE.0, SNR_RANGE.1);
        let (mut y, mut x) = (rng.below(height) as isize, rng.below(width) as isize);
        let (dy, dx) = [(0, 1), (1, 0), (1, 1), (1, -1)][rng.below(4)];
        for _ in 0..(height.min(width) / 2) {
            if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                break;
            }
            let i = y as usize * width + x as usize;
            if labels[i] == 0 {
                img[i] += contrast;
            }
            y += dy;
            x += dx;
            if rng.uniform() < 0.3 {
                x += if rng.uniform() < 0.5 { -1 } else { 1 };
            }
        }
    }

    // Blob intensity, slightly softened at the rim.
    let soft = box_blur(&raise, height, width, 1);
    for i in 0..n {
        img[i] += 0.5 * raise[i] + 0.5 * soft[i] + rng.normal();
    }

    SyntheticSample {
        image: Tensor::from_parts(vec![height, width, 1], img.into_iter().map(|v| v as f32).collect()),
        mask: labels,
        meta: SampleMeta {
            index,
            seed: sample_seed,
            blobs,
        },
    }
}

/// `n_samples` images of `height×width` with `n_classes` labels (2 or 3).
/// Deterministic per `(seed, index)` regardless of thread count.
pub fn generate(
    n_samples: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if height < 32 || width < 32 {
        return Err(PsgrError::invalid(format!(
            "images must be at least 32x32, got {height}x{width}"
        )));
    }
    if !(2..=3).contains(&n_classes) {
        return Err(PsgrError::invalid(format!("n_classes must be 2 or 3, got {n_classes}")));
    }
    Ok((0..n_samples)
        .into_par_iter()
        .map(|i| sample(i, height, width, n_classes, seed))
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub seed: Option<u64>,
    pub samples: Vec<SampleMeta>,
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:05}.pstn"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("msk_{i:05}.pstn"))
}

/// Writes `img_%05d.pstn`, `msk_%05d.pstn` and `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset, manifest: &Manifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, (img, m)) in data.images.iter().zip(&data.masks).enumerate() {
        pstn::write(image_path(dir, i), img)?;
        pstn::write_u8(mask_path(dir, i), &[data.height, data.width], m)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a directory written by [`write_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut images = Vec::with_capacity(manifest.n_samples);
    let mut masks = Vec::with_capacity(manifest.n_samples);
    for i in 0..manifest.n_samples {
        images.push(pstn::read(image_path(dir, i))?.into_float::<f32>()?);
        let (shape, m) = match pstn::read(mask_path(dir, i))? {
            PstnData::U8 { shape, data } => (shape, data),
            other => {
                return Err(PsgrError::Format(format!(
                    "mask {i} has dtype {}, expected u8",
                    other.dtype().name()
                )))
            }
        };
        if shape != [manifest.height, manifest.width] {
            return Err(PsgrError::Format(format!("mask {i} has shape {shape:?}")));
        }
        masks.push(m);
    }
    Dataset::new(manifest.height, manifest.width, manifest.n_classes, images, masks)
}

/// An 8-bit grayscale PGM as an `h×w×1` image scaled to `[0, 1]`.
pub fn import_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = read_gray(path.as_ref())?;
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 1], data)
}

/// Raw 8-bit values of a PGM, used for label masks.
pub fn import_pgm_labels(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = read_gray(path.as_ref())?;
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn read_gray(path: &Path) -> Result<image::GrayImage> {
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    if reader.format() != Some(image::ImageFormat::Pnm) {
        return Err(PsgrError::Format(format!("{} is not a PGM file", path.display())));
    }
    let img = reader
        .decode()
        .map_err(|e| PsgrError::Format(format!("{}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        _ => Err(PsgrError::Format(format!("{} is not 8-bit grayscale", path.display()))),
    }
}
