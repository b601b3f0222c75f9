//! Datasets, CIFAR binary I/O, the synthetic generator, augmentation and
//! deterministic batching.
//!
//! CIFAR-10 record: `[label][1024 R][1024 G][1024 B]`, row-major within each
//! channel. CIFAR-100 record: `[coarse][fine][pixels as above]`; the coarse
//! byte is read and discarded.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, c, h, w]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be [N,c,h,w], got {:?}", images.shape())));
        }
        if labels.is_empty() || labels.len() != images.shape()[0] {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {} images", labels.len(), images.shape()[0]),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images.select(idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let (c, h, w) = self.image_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images.data().chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let stds = sq
            .iter()
            .zip(&means)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        (means.iter().map(|&m| m as f32).collect(), stds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100Fine,
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100Fine => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
        }
    }

    fn label_offset(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 0,
            CifarVariant::Cifar100Fine => 1,
        }
    }
}

fn decode_records(bytes: &[u8], header: usize, label_at: usize, classes: usize, shape: [usize; 3]) -> Result<Dataset> {
    let pixels = shape[0] * shape[1] * shape[2];
    let record = header + pixels;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Truncated {
            len: bytes.len(),
            record,
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels);
    for rec in bytes.chunks(record) {
        let label = rec[label_at] as usize;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        labels.push(label);
        data.extend(rec[header..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new([n, shape[0], shape[1], shape[2]], data)?, labels, classes, Split::Train)
}

fn encode_records(ds: &Dataset, header: usize, label_at: usize) -> Vec<u8> {
    let (c, h, w) = ds.image_shape();
    let pixels = c * h * w;
    let mut out = Vec::with_capacity(ds.len() * (header + pixels));
    for (img, &label) in ds.images.data().chunks(pixels).zip(&ds.labels) {
        let mut head = vec![0u8; header];
        head[label_at] = label as u8;
        out.extend(head);
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    decode_records(
        bytes,
        variant.record_len() - CIFAR_PIXELS,
        variant.label_offset(),
        variant.classes(),
        [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
    )
}

pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    decode_cifar(&fs::read(path)?, variant)
}

/// Inverse of [`decode_cifar`]. Pixels are quantized to `round(255·v)`; the
/// CIFAR-100 coarse byte is written as 0.
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.image_shape() != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::shape("encode_cifar", format!("CIFAR images are 3x32x32, got {:?}", ds.image_shape())));
    }
    if ds.class_count > variant.classes() {
        return Err(Error::LabelOutOfRange {
            label: ds.class_count - 1,
            classes: variant.classes(),
        });
    }
    Ok(encode_records(ds, variant.record_len() - CIFAR_PIXELS, variant.label_offset()))
}

pub fn write_cifar_binary(path: impl AsRef<Path>, ds: &Dataset, variant: CifarVariant) -> Result<()> {
    fs::write(path, encode_cifar(ds, variant)?)?;
    Ok(())
}

/// Parameters of the synthetic class-template dataset; also the JSON
/// sidecar written next to an exported record file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Image-formation constants of the synthetic generator.
pub mod synthetic {
    /// Side of the coarse random grid each template is upsampled from.
    pub const GRID: usize = 4;
    /// Weight of the template shared by all classes.
    pub const SHARED: f32 = 0.5;
    /// Standard deviation of the per-pixel Gaussian noise.
    pub const NOISE: f32 = 0.35;
    /// Maximum circular shift, as a fraction of the image side.
    pub const SHIFT_FRAC: f32 = 0.125;
    pub const CHANNELS: usize = 3;
}

fn upsample_grid(grid: &[f32], g: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = (y as f32 + 0.5) / size as f32 * g as f32 - 0.5;
        let y0 = fy.floor().clamp(0.0, (g - 1) as f32) as usize;
        let y1 = (y0 + 1).min(g - 1);
        let ty = (fy - y0 as f32).clamp(0.0, 1.0);
        for x in 0..size {
            let fx = (x as f32 + 0.5) / size as f32 * g as f32 - 0.5;
            let x0 = fx.floor().clamp(0.0, (g - 1) as f32) as usize;
            let x1 = (x0 + 1).min(g - 1);
            let tx = (fx - x0 as f32).clamp(0.0, 1.0);
            let top = grid[y0 * g + x0] * (1.0 - tx) + grid[y0 * g + x1] * tx;
            let bot = grid[y1 * g + x0] * (1.0 - tx) + grid[y1 * g + x1] * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Per-class `[c, s, s]` templates: a shared smooth pattern mixed with a
/// class-specific smooth pattern.
pub fn synthetic_templates(classes: usize, image_size: usize, seed: u64) -> Vec<Vec<f32>> {
    use synthetic::*;
    let mut rng = seed::rng(seed::derive(seed, 0));
    let smooth = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
        (0..CHANNELS)
            .flat_map(|_| {
                let grid: Vec<f32> = (0..GRID * GRID).map(|_| rng.random::<f32>()).collect();
                upsample_grid(&grid, GRID, image_size)
            })
            .collect()
    };
    let shared = smooth(&mut rng);
    (0..classes)
        .map(|_| {
            let own = smooth(&mut rng);
            shared.iter().zip(&own).map(|(s, o)| SHARED * s + (1.0 - SHARED) * o).collect()
        })
        .collect()
}

fn synthetic_samples(spec: &SyntheticSpec, per_class: usize, stream: u64, split: Split) -> Result<Dataset> {
    use synthetic::*;
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!("synthetic data needs at least 2 classes, got {}", spec.classes)));
    }
    if spec.image_size == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("synthetic image_size and per_class must be positive".into()));
    }
    let s = spec.image_size;
    let templates = synthetic_templates(spec.classes, s, spec.seed);
    let mut rng = seed::rng(seed::derive(spec.seed, 100 + stream));
    let noise = Normal::new(0.0f32, NOISE).expect("valid sigma");
    let max_shift = ((s as f32 * SHIFT_FRAC).round() as i64).max(0);
    let n = spec.classes * per_class;
    let mut data = Vec::with_capacity(n * CHANNELS * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // interleave classes so every prefix is roughly balanced
        let class = i % spec.classes;
        let dy = rng.random_range(-max_shift..=max_shift);
        let dx = rng.random_range(-max_shift..=max_shift);
        let t = &templates[class];
        for c in 0..CHANNELS {
            for y in 0..s {
                let sy = (y as i64 - dy).rem_euclid(s as i64) as usize;
                for x in 0..s {
                    let sx = (x as i64 - dx).rem_euclid(s as i64) as usize;
                    let v = t[(c * s + sy) * s + sx] + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new([n, CHANNELS, s, s], data)?, labels, spec.classes, split)
}

/// Class-conditional images: fixed per-class template, random circular
/// shift, Gaussian pixel noise, clamped to `[0, 1]`. Training split.
pub fn make_synthetic(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    let spec = SyntheticSpec {
        classes,
        per_class,
        image_size,
        seed,
    };
    synthetic_samples(&spec, per_class, 0, Split::Train)
}

/// Train split of `spec` plus a validation split drawn from the same
/// templates with an independent sample stream.
pub fn make_synthetic_split(spec: &SyntheticSpec, val_per_class: usize) -> Result<(Dataset, Dataset)> {
    Ok((
        synthetic_samples(spec, spec.per_class, 0, Split::Train)?,
        synthetic_samples(spec, val_per_class, 1, Split::Val)?,
    ))
}

/// A fresh sample set from the same templates (stream ≥ 2 is never used by
/// the train/val splits).
pub fn make_synthetic_stream(spec: &SyntheticSpec, per_class: usize, stream: u64) -> Result<Dataset> {
    synthetic_samples(spec, per_class, stream, Split::Val)
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes CIFAR-10-layout records (`[label][c·s·s pixels]`) to `path` and
/// the generator parameters to `path` with a `.json` extension.
pub fn export_synthetic(path: impl AsRef<Path>, ds: &Dataset, spec: &SyntheticSpec) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_records(ds, 1, 0))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

pub fn import_synthetic(path: impl AsRef<Path>) -> Result<(Dataset, SyntheticSpec)> {
    let path = path.as_ref();
    let spec: SyntheticSpec = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let s = spec.image_size;
    let ds = decode_records(&fs::read(path)?, 1, 0, spec.classes, [synthetic::CHANNELS, s, s])?;
    Ok((ds, spec))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub random_crop: bool,
    pub hflip_prob: f64,
    pub channel_means: Vec<f32>,
    pub channel_stds: Vec<f32>,
}

impl AugmentConfig {
    /// No geometric augmentation; normalization with the given statistics.
    pub fn normalize_only(channel_means: Vec<f32>, channel_stds: Vec<f32>) -> Self {
        Self {
            pad: 0,
            random_crop: false,
            hflip_prob: 0.0,
            channel_means,
            channel_stds,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.channel_means.len() != channels || self.channel_stds.len() != channels {
            return Err(Error::Config(format!(
                "normalization needs {channels} means and stds, got {} and {}",
                self.channel_means.len(),
                self.channel_stds.len()
            )));
        }
        if self.channel_stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("channel stds must be strictly positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob)));
        }
        Ok(())
    }
}

/// Per-channel `(x − mean) / std`.
pub fn normalize(batch: &Tensor, cfg: &AugmentConfig) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::shape("normalize", format!("expected [n,c,h,w], got {s:?}")));
    }
    cfg.validate(s[1])?;
    let plane = s[2] * s[3];
    let mut out = batch.detached();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s[1];
        *v = (*v - cfg.channel_means[c]) / cfg.channel_stds[c];
    }
    Ok(out)
}

/// Zero-pad by `pad`, crop back to the input size at a random offset (or
/// the centre when `random_crop` is off), flip horizontally with
/// probability `hflip_prob`, then normalize. Each sample draws its flip and
/// its offsets from `rng` in that order.
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::shape("augment_batch", format!("expected [n,c,h,w], got {s:?}")));
    }
    cfg.validate(s[1])?;
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = cfg.pad;
    let mut out = vec![0.0f32; batch.numel()];
    let src = batch.data();
    for i in 0..n {
        let flip = rng.random::<f64>() < cfg.hflip_prob;
        let (oy, ox) = if cfg.random_crop && p > 0 {
            (rng.random_range(0..=2 * p), rng.random_range(0..=2 * p))
        } else {
            (p, p)
        };
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                // row y of the crop is row (y + oy − p) of the original
                let sy = y as isize + oy as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + ox as isize - p as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    normalize(&Tensor::new(s.to_vec(), out)?, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

/// Index batches for one epoch. Training order is a permutation fixed by
/// `(shuffle_seed, epoch)`; validation order is the identity.
pub fn iterate_batches(ds: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if ds.split == Split::Train {
        let mut rng = seed::rng(seed::derive(plan.shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(plan.batch_size).map(|c| c.to_vec()).collect();
    if plan.drop_last && batches.last().is_some_and(|b| b.len() < plan.batch_size) {
        batches.pop();
    }
    Ok(batches)
}

/// RNG for augmenting batch `batch` of `epoch`.
pub fn augment_rng(augment_seed: u64, epoch: usize, batch: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed::derive(seed::derive(augment_seed, epoch as u64), batch as u64))
}
