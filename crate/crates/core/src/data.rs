//! Image datasets, splits and augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pyramid::ImageShape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file {0}")]
    MissingFile(String),
    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Images `[n, H, W, C]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.shape().len() != 4 || images.rows() != labels.len() {
            return Err(DataError::Malformed(format!(
                "images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(DataError::Malformed("label out of range".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape::new(s[1], s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Seeded shuffle, then `floor(n * val_fraction)` examples go to validation.
pub fn split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<Splits, DataError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::InvalidSplit(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let n = data.len();
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() {
        return Err(DataError::InvalidSplit("training split is empty".into()));
    }
    Ok(Splits {
        train: data.subset(train_idx),
        val: data.subset(val_idx),
    })
}

/// Parameters of the procedural "Gaussian blob" image classes.
///
/// Each class owns a fixed constellation of colored blobs. Samples jitter the
/// blob positions and amplitudes, add a random distractor blob, a random
/// background tint and pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub image: ImageShape,
    pub seed: u64,
    #[serde(default = "default_blobs")]
    pub blobs_per_class: usize,
    /// Standard deviation of blob-center jitter, in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
}

fn default_blobs() -> usize {
    3
}
fn default_jitter() -> f64 {
    2.5
}
fn default_noise() -> f64 {
    0.1
}
fn default_distractors() -> usize {
    2
}

impl SyntheticSpec {
    pub fn new(n: usize, classes: usize, image: ImageShape, seed: u64) -> Self {
        Self {
            n,
            classes,
            image,
            seed,
            blobs_per_class: default_blobs(),
            jitter: default_jitter(),
            noise: default_noise(),
            distractors: default_distractors(),
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: Vec<f64>,
}

fn random_blob<R: Rng>(rng: &mut R, shape: ImageShape) -> Blob {
    let margin = 0.15;
    Blob {
        cy: rng.random_range(margin..1.0 - margin) * shape.height as f64,
        cx: rng.random_range(margin..1.0 - margin) * shape.width as f64,
        sigma: rng.random_range(0.07..0.16) * shape.height.max(shape.width) as f64,
        color: (0..shape.channels).map(|_| rng.random_range(-0.6..0.6)).collect(),
    }
}

fn paint(img: &mut [f64], shape: ImageShape, blob: &Blob, amp: f64) {
    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
    for y in 0..shape.height {
        let dy = y as f64 + 0.5 - blob.cy;
        for x in 0..shape.width {
            let dx = x as f64 + 0.5 - blob.cx;
            let w = amp * (-(dy * dy + dx * dx) * inv).exp();
            let base = (y * shape.width + x) * shape.channels;
            for c in 0..shape.channels {
                img[base + c] += w * blob.color[c];
            }
        }
    }
}

/// Deterministic procedural dataset; labels cycle through the classes.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 || spec.image.pixels() == 0 {
        return Err(DataError::Malformed("synthetic data needs >= 2 classes and a non-empty image".into()));
    }
    let shape = spec.image;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_b10b);
    let prototypes: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| (0..spec.blobs_per_class).map(|_| random_blob(&mut proto_rng, shape)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter.max(1e-12)).expect("valid jitter");
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid noise");
    let per = shape.pixels();
    let mut data = Vec::with_capacity(spec.n * per);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % spec.classes;
        let mut img = vec![0.0; per];
        let level = rng.random_range(0.3..0.6);
        let tint: Vec<f64> = (0..shape.channels).map(|_| rng.random_range(-0.1..0.1)).collect();
        for (j, v) in img.iter_mut().enumerate() {
            *v = level + tint[j % shape.channels];
        }
        for proto in &prototypes[label] {
            let blob = Blob {
                cy: proto.cy + jitter.sample(&mut rng),
                cx: proto.cx + jitter.sample(&mut rng),
                sigma: proto.sigma * rng.random_range(0.8..1.25),
                color: proto.color.clone(),
            };
            let amp = rng.random_range(0.5..1.2);
            paint(&mut img, shape, &blob, amp);
        }
        for _ in 0..spec.distractors {
            let blob = random_blob(&mut rng, shape);
            let amp = rng.random_range(0.3..0.9);
            paint(&mut img, shape, &blob, amp);
        }
        for v in img.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&img);
        labels.push(label);
    }
    Dataset::new(
        Tensor::from_vec(&[spec.n, shape.height, shape.width, shape.channels], data),
        labels,
        spec.classes,
    )
}

const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reads the CIFAR-10 binary training batches under `root`.
///
/// `checksums` maps file names to expected hex SHA-256 digests; files without
/// an entry are not verified.
pub fn load_cifar10(
    root: &Path,
    checksums: &std::collections::BTreeMap<String, String>,
    limit: Option<usize>,
) -> Result<Dataset, DataError> {
    const RECORD: usize = 1 + 3072;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let path = root.join(name);
        if !path.exists() {
            return Err(DataError::MissingFile(path.display().to_string()));
        }
        if let Some(expected) = checksums.get(name) {
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(DataError::Checksum {
                    file: name.to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        let bytes = fs::read(&path)?;
        if bytes.len() % RECORD != 0 {
            return Err(DataError::Malformed(format!("{name}: truncated record")));
        }
        for rec in bytes.chunks(RECORD) {
            if limit.is_some_and(|l| labels.len() >= l) {
                break;
            }
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(DataError::Malformed(format!("{name}: label {label}")));
            }
            labels.push(label);
            // planes are stored CHW (1024 red, 1024 green, 1024 blue)
            for p in 0..1024 {
                for c in 0..3 {
                    data.push(rec[1 + c * 1024 + p] as f64 / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, 32, 32, 3], data), labels, 10)
}

/// Random horizontal flip plus random translation by up to `crop_padding`
/// pixels (zero fill), the pad-and-crop scheme common for small images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            crop_padding: 4,
        }
    }
}

pub fn augment<R: Rng>(images: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    if !cfg.flip && cfg.crop_padding == 0 {
        return images.clone();
    }
    let s = images.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let per = h * w * c;
    let pad = cfg.crop_padding as i64;
    let mut out = Tensor::zeros(s);
    for (src, dst) in images.data().chunks(per).zip(out.data_mut().chunks_mut(per)) {
        let flip = cfg.flip && rng.random_bool(0.5);
        let (oy, ox) = if pad > 0 {
            (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad))
        } else {
            (0, 0)
        };
        for y in 0..h {
            let sy = y as i64 + oy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let fx = if flip { w - 1 - x } else { x };
                let sx = fx as i64 + ox;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let si = (sy as usize * w + sx as usize) * c;
                let di = (y * w + x) * c;
                dst[di..di + c].copy_from_slice(&src[si..si + c]);
            }
        }
    }
    out
}
