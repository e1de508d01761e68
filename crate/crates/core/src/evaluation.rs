//! Measurement instruments: accuracy, attack strength, corruption robustness,
//! loss landscapes and pyramid visualisation.
//!
//! Nothing here mutates a model; every function takes it by shared reference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{pgd_pyramid_attack, AdversaryError, AttackConfig};
use crate::cost::CostLedger;
use crate::data::Dataset;
use crate::models::{argmax_rows, forward_loss, predict_logits, Classifier, Model, ModelError, ParamKind};
use crate::pyramid::{tile_index, PyramidError, PyramidPerturbation};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("unknown corruption {0:?} (expected one of gaussian_noise, blur, contrast, pixelate)")]
    UnknownCorruption(String),
    #[error("severity {0} out of range 0..=3")]
    Severity(usize),
    #[error("landscape grid must be odd and >= 1, got {0}")]
    Grid(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn error_rate(logits: &Tensor, labels: &[usize]) -> f64 {
    let wrong = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    wrong as f64 / labels.len() as f64
}

/// `correct / n`, the same arithmetic as the per-epoch validation metric.
fn fraction_correct(logits: &Tensor, labels: &[usize]) -> f64 {
    let right = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    right as f64 / labels.len() as f64
}

pub fn accuracy<M: Classifier + ?Sized>(model: &M, data: &Dataset, chunk: usize) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let logits = predict_logits(model, &data.images, chunk)?;
    Ok(fraction_correct(&logits, &data.labels))
}

/// Which adversary to measure.
#[derive(Clone, Debug)]
pub enum AdversaryMode<'a> {
    /// A trained shared pattern, applied at `radius`.
    Universal {
        state: &'a PyramidPerturbation,
        radius: f64,
    },
    /// A fresh multi-step attack per chunk.
    SampleWise { attack: AttackConfig, radius: f64, seed: u64 },
}

/// `err(x + delta) - err(x)` over the split, in absolute fraction of examples.
pub fn attack_strength<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    mode: &AdversaryMode<'_>,
    chunk: usize,
) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let chunk = chunk.max(1);
    let clean = predict_logits(model, &data.images, chunk)?;
    let perturbed = match mode {
        AdversaryMode::Universal { state, radius } => state.perturb(&data.images, *radius)?,
        AdversaryMode::SampleWise { attack, radius, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut ledger = CostLedger::new();
            let mut parts = Vec::with_capacity(data.images.len());
            let n = data.len();
            let mut start = 0;
            while start < n {
                let end = (start + chunk).min(n);
                let x = data.images.slice_rows(start, end);
                let out = pgd_pyramid_attack(model, &x, &data.labels[start..end], attack, *radius, &mut rng, &mut ledger)?;
                parts.extend_from_slice(out.perturbed.data());
                start = end;
            }
            Tensor::from_vec(data.images.shape(), parts)
        }
    };
    let adv = predict_logits(model, &perturbed, chunk)?;
    Ok(error_rate(&adv, &data.labels) - error_rate(&clean, &data.labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    Blur,
    Contrast,
    Pixelate,
}

pub const MAX_SEVERITY: usize = 3;

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::GaussianNoise,
        Corruption::Blur,
        Corruption::Contrast,
        Corruption::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::Blur => "blur",
            Corruption::Contrast => "contrast",
            Corruption::Pixelate => "pixelate",
        }
    }

    pub fn parse(name: &str) -> Result<Self, EvalError> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| EvalError::UnknownCorruption(name.to_string()))
    }

    /// Strength parameter for a severity; severity 0 is the identity.
    ///
    /// Noise std, blur sigma (pixels), contrast factor, pixelation block size.
    pub fn parameter(self, severity: usize) -> f64 {
        let table = match self {
            Corruption::GaussianNoise => [0.0, 0.04, 0.08, 0.16],
            Corruption::Blur => [0.0, 0.6, 1.0, 1.6],
            Corruption::Contrast => [1.0, 0.6, 0.4, 0.2],
            Corruption::Pixelate => [1.0, 2.0, 3.0, 4.0],
        };
        table[severity]
    }

    /// Applies the corruption to `[n, H, W, C]` images, deterministic in `seed`.
    pub fn apply(self, images: &Tensor, severity: usize, seed: u64) -> Result<Tensor, EvalError> {
        if severity > MAX_SEVERITY {
            return Err(EvalError::Severity(severity));
        }
        if severity == 0 {
            return Ok(images.clone());
        }
        let p = self.parameter(severity);
        Ok(match self {
            Corruption::GaussianNoise => gaussian_noise(images, p, seed),
            Corruption::Blur => gaussian_blur(images, p),
            Corruption::Contrast => contrast(images, p),
            Corruption::Pixelate => pixelate(images, p as usize),
        })
    }
}

pub fn gaussian_noise(images: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return images.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = images.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + sigma * z).clamp(0.0, 1.0);
    }
    out
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(images: &Tensor, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return images.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let s = images.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let per = h * w * c;
    let mut out = images.clone();
    let mut tmp = vec![0.0; per];
    for img in out.data_mut().chunks_mut(per) {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, d) in kernel.iter().zip(-radius..=radius) {
                        let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                        acc += k * img[(y * w + xx) * c + ch];
                    }
                    tmp[(y * w + x) * c + ch] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, d) in kernel.iter().zip(-radius..=radius) {
                        let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                        acc += k * tmp[(yy * w + x) * c + ch];
                    }
                    img[(y * w + x) * c + ch] = acc;
                }
            }
        }
    }
    out
}

/// Pulls pixels towards each image's mean by `factor`.
pub fn contrast(images: &Tensor, factor: f64) -> Tensor {
    let mut out = images.clone();
    if factor == 1.0 {
        return out;
    }
    let per = images.row_len();
    for img in out.data_mut().chunks_mut(per) {
        let mean = img.iter().sum::<f64>() / per as f64;
        for v in img.iter_mut() {
            *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Replaces each `block x block` tile (top-left aligned) by its mean.
pub fn pixelate(images: &Tensor, block: usize) -> Tensor {
    if block <= 1 {
        return images.clone();
    }
    let s = images.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut out = images.clone();
    for img in out.data_mut().chunks_mut(h * w * c) {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let ys = by..(by + block).min(h);
                let xs = bx..(bx + block).min(w);
                let count = (ys.len() * xs.len()) as f64;
                for ch in 0..c {
                    let mut sum = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            sum += img[(y * w + x) * c + ch];
                        }
                    }
                    let mean = sum / count;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            img[(y * w + x) * c + ch] = mean;
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    /// Accuracy per corruption name, indexed by severity.
    pub accs: BTreeMap<String, Vec<f64>>,
    /// Soft monotonicity violations (noise accuracy rising with severity).
    pub warnings: Vec<String>,
}

/// Accuracy for every `(corruption, severity)` cell, severities `0..=max_severity`.
pub fn corruption_eval<M: Classifier + Sync + ?Sized>(
    model: &M,
    data: &Dataset,
    corruptions: &[&str],
    max_severity: usize,
    seed: u64,
    chunk: usize,
) -> Result<CorruptionReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if max_severity > MAX_SEVERITY {
        return Err(EvalError::Severity(max_severity));
    }
    let kinds = corruptions
        .iter()
        .map(|n| Corruption::parse(n))
        .collect::<Result<Vec<_>, _>>()?;
    let cells: Vec<(Corruption, usize)> = kinds
        .iter()
        .flat_map(|&k| (0..=max_severity).map(move |s| (k, s)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(k, s)| {
            let x = k.apply(&data.images, s, seed)?;
            let logits = predict_logits(model, &x, chunk)?;
            Ok(fraction_correct(&logits, &data.labels))
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (&(k, _), acc) in cells.iter().zip(results) {
        accs.entry(k.name().to_string()).or_default().push(acc);
    }
    let mut warnings = Vec::new();
    if let Some(noise) = accs.get(Corruption::GaussianNoise.name()) {
        for s in 1..noise.len() {
            if noise[s] > noise[s - 1] {
                warnings.push(format!(
                    "gaussian_noise accuracy rose from {:.4} to {:.4} at severity {s}",
                    noise[s - 1],
                    noise[s]
                ));
            }
        }
    }
    Ok(CorruptionReport { accs, warnings })
}

/// Loss values on a square grid around the trained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    /// Row-major, `losses[i * n + j]` at `(alphas[i], alphas[j])`.
    pub losses: Vec<f64>,
}

impl LandscapeGrid {
    pub fn size(&self) -> usize {
        self.alphas.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.size() + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.size() / 2;
        self.at(c, c)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "col", "alpha1", "alpha2", "loss"])?;
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.alphas.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    a.to_string(),
                    b.to_string(),
                    self.at(i, j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Heatmap of `ln(1 + loss)`, `cell` pixels per grid point, dark = low.
    pub fn write_heatmap(&self, path: &Path, cell: usize) -> Result<(), EvalError> {
        let n = self.size();
        let cell = cell.max(1);
        let vals: Vec<f64> = self.losses.iter().map(|l| l.ln_1p()).collect();
        let (lo, hi) = min_max(&vals);
        let img: RgbImage = ImageBuffer::from_fn((n * cell) as u32, (n * cell) as u32, |x, y| {
            let v = vals[(y as usize / cell) * n + x as usize / cell];
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            ramp(t)
        });
        img.save(path)?;
        Ok(())
    }
}

/// Dark blue to yellow.
fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(20.0, 250.0), lerp(20.0, 230.0), lerp(110.0, 40.0)])
}

/// Gaussian direction, rescaled so every row of every linear weight matrix has
/// the norm of the matching weight row. Other parameters get zero direction.
pub fn filter_normalized_direction(model: &Model, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    model
        .params()
        .iter()
        .map(|p| {
            let shape = p.value.shape();
            let mut d = Tensor::zeros(shape);
            if p.kind != ParamKind::Weight {
                return d;
            }
            let row = *shape.last().expect("weights are at least 1-D");
            for (dr, wr) in d.data_mut().chunks_mut(row).zip(p.value.data().chunks(row)) {
                for v in dr.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let dn = dr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let wn = wr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if dn > 0.0 && wn > 0.0 { wn / dn } else { 0.0 };
                dr.iter_mut().for_each(|v| *v *= scale);
            }
            d
        })
        .collect()
}

/// `loss(theta + a_i d1 + a_j d2)` on a fixed sample, `a` evenly spaced in
/// `[-span, span]` over an odd `grid_n` so the centre is exactly `theta`.
pub fn loss_landscape(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    grid_n: usize,
    span: f64,
    seed: u64,
) -> Result<LandscapeGrid, EvalError> {
    if grid_n == 0 || grid_n.is_multiple_of(2) {
        return Err(EvalError::Grid(grid_n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized_direction(model, &mut rng);
    let d2 = filter_normalized_direction(model, &mut rng);
    let half = (grid_n - 1) as f64;
    let alphas: Vec<f64> = (0..grid_n)
        .map(|i| if grid_n == 1 { 0.0 } else { span * (2.0 * i as f64 - half) / half })
        .collect();
    let losses = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (alphas[cell / grid_n], alphas[cell % grid_n]);
            let mut m = model.clone();
            for ((p, u), v) in m.params_mut().iter_mut().zip(&d1).zip(&d2) {
                for ((x, du), dv) in p.value.data_mut().iter_mut().zip(u.data()).zip(v.data()) {
                    *x += a * du + b * dv;
                }
            }
            Ok(forward_loss(&m, images, labels)?.loss)
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    Ok(LandscapeGrid { alphas, losses })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Min-max normalisation to `[0, 1]`; a constant input maps to 0.5.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(v);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn to_rgb(values: &[f64], h: usize, w: usize, c: usize, upscale: usize) -> RgbImage {
    let up = upscale.max(1);
    ImageBuffer::from_fn((w * up) as u32, (h * up) as u32, |x, y| {
        let base = ((y as usize / up) * w + x as usize / up) * c;
        let px = |ch: usize| (values[base + ch.min(c - 1)] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// One level of pattern `index`, nearest-neighbour expanded to full
/// resolution and normalised independently. Values are `HWC` in `[0, 1]`.
pub fn level_image(pert: &PyramidPerturbation, level: usize, index: usize) -> Vec<f64> {
    let t = pert.target();
    let spec = pert.spec();
    let lv = &pert.levels()[level];
    let count = pert.count();
    let map = tile_index(t, spec.scales[level], spec.per_channel, count, count);
    let per = t.pixels();
    let raw: Vec<f64> = map[index * per..(index + 1) * per]
        .iter()
        .map(|&i| lv.data()[i])
        .collect();
    normalize(&raw)
}

/// Normalised materialised pattern `index`.
pub fn composite_image(pert: &PyramidPerturbation, index: usize, radius: f64) -> Result<Vec<f64>, EvalError> {
    let full = pert.materialize(radius)?;
    let per = pert.target().pixels();
    Ok(normalize(&full.data()[index * per..(index + 1) * per]))
}

/// Writes `level_<scale>.png` for each level and `composite.png` into `dir`.
pub fn export_pyramid_images(
    pert: &PyramidPerturbation,
    index: usize,
    radius: f64,
    upscale: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let t = pert.target();
    let mut written = Vec::new();
    for (level, s) in pert.spec().scales.iter().enumerate() {
        let path = dir.join(format!("level_{s}.png"));
        to_rgb(&level_image(pert, level, index), t.height, t.width, t.channels, upscale).save(&path)?;
        written.push(path);
    }
    let path = dir.join("composite.png");
    to_rgb(&composite_image(pert, index, radius)?, t.height, t.width, t.channels, upscale).save(&path)?;
    written.push(path);
    Ok(written)
}

/// Summary of one frozen model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub adv_error_increase_train: Option<f64>,
    pub adv_error_increase_val: Option<f64>,
    pub corruption_accs: BTreeMap<String, Vec<f64>>,
    pub landscape: Option<LandscapeGrid>,
}
