//! Multi-scale ("pyramid") perturbations.
//!
//! A perturbation is a stack of parameter grids, one per scale `s`. At scale `s`
//! every `s x s` pixel tile shares a single parameter (per channel when
//! `per_channel` is set). The full-resolution perturbation is
//!
//! ```text
//! delta(y, x, c) = sum_s m_s * clip(level_s[y / s, x / s, c'], -r, r)
//! ```
//!
//! with tiles aligned to the top-left corner. Edge tiles are truncated when the
//! image size is not a multiple of the scale.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum PyramidError {
    #[error("invalid pyramid spec: {0}")]
    InvalidSpec(String),
    #[error("scale {scale} exceeds both image dimensions {height}x{width}")]
    ScaleTooLarge { scale: usize, height: usize, width: usize },
    #[error("image shape must have positive dimensions, got {0:?}")]
    EmptyShape(ImageShape),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at scale {scale}")]
    NonFiniteGradient { scale: usize },
    #[error("radius must be finite and non-negative, got {0}")]
    InvalidRadius(f64),
}

/// Height, width and channel count of an image (stored `HWC`, row-major).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Shape of the adversary: scales, multipliers, radius and step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    /// Tile side lengths, coarse to fine, ending in 1.
    pub scales: Vec<usize>,
    /// Per-scale multipliers `m_s`.
    pub multipliers: Vec<f64>,
    /// l-infinity radius in `[0, 1]` pixel units.
    pub radius: f64,
    /// Sign-ascent step size.
    pub step_size: f64,
    pub per_channel: bool,
}

impl PyramidSpec {
    /// `S = [32, 16, 1]`, `M = [20, 10, 1]` at the given radius and step size.
    pub fn standard(radius: f64, step_size: f64) -> Self {
        Self {
            scales: vec![32, 16, 1],
            multipliers: vec![20.0, 10.0, 1.0],
            radius,
            step_size,
            per_channel: true,
        }
    }

    /// Single pixel-level scale with unit multiplier.
    pub fn flat(radius: f64, step_size: f64) -> Self {
        Self {
            scales: vec![1],
            multipliers: vec![1.0],
            radius,
            step_size,
            per_channel: true,
        }
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        let bad = |m: &str| Err(PyramidError::InvalidSpec(m.to_string()));
        if self.scales.is_empty() {
            return bad("at least one scale is required");
        }
        if self.scales.len() != self.multipliers.len() {
            return bad("scales and multipliers must have equal length");
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return bad("scales must be strictly decreasing");
        }
        if *self.scales.last().unwrap() != 1 {
            return bad("the finest scale must be 1");
        }
        if self.multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return bad("multipliers must be positive");
        }
        if !(0.0..=1.0).contains(&self.radius) {
            return bad("radius must lie in [0, 1]");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step size must be positive");
        }
        Ok(())
    }

    pub fn multiplier_sum(&self) -> f64 {
        self.multipliers.iter().sum()
    }
}

/// Grid shape `(rows, cols, channels)` of one level.
pub fn level_grid(shape: ImageShape, scale: usize, per_channel: bool) -> (usize, usize, usize) {
    (
        shape.height.div_ceil(scale),
        shape.width.div_ceil(scale),
        if per_channel { shape.channels } else { 1 },
    )
}

/// Pyramid parameters for `count` independent patterns (1 for a universal
/// perturbation, the batch size for a sample-wise attack).
///
/// Each level tensor has shape `[count, rows, cols, channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidPerturbation {
    spec: PyramidSpec,
    levels: Vec<Tensor>,
    target: ImageShape,
}

impl PyramidPerturbation {
    /// A single zero pattern.
    pub fn init_zeros(spec: PyramidSpec, target: ImageShape) -> Result<Self, PyramidError> {
        Self::zeros_batch(spec, target, 1)
    }

    pub fn zeros_batch(
        spec: PyramidSpec,
        target: ImageShape,
        count: usize,
    ) -> Result<Self, PyramidError> {
        spec.validate()?;
        if target.height == 0 || target.width == 0 || target.channels == 0 || count == 0 {
            return Err(PyramidError::EmptyShape(target));
        }
        for &s in &spec.scales {
            if s > target.height && s > target.width {
                return Err(PyramidError::ScaleTooLarge {
                    scale: s,
                    height: target.height,
                    width: target.width,
                });
            }
        }
        let levels = spec
            .scales
            .iter()
            .map(|&s| {
                let (r, c, ch) = level_grid(target, s, spec.per_channel);
                Tensor::zeros(&[count, r, c, ch])
            })
            .collect();
        Ok(Self {
            spec,
            levels,
            target,
        })
    }

    /// Uniform random pattern in `[-radius, radius]` for every level entry.
    pub fn uniform_batch<R: Rng>(
        spec: PyramidSpec,
        target: ImageShape,
        count: usize,
        radius: f64,
        rng: &mut R,
    ) -> Result<Self, PyramidError> {
        let mut p = Self::zeros_batch(spec, target, count)?;
        if radius > 0.0 {
            for level in &mut p.levels {
                for v in level.data_mut() {
                    *v = rng.random_range(-radius..=radius);
                }
            }
        }
        Ok(p)
    }

    /// Rebuilds a perturbation from stored levels, checking every shape.
    pub fn from_levels(
        spec: PyramidSpec,
        target: ImageShape,
        levels: Vec<Tensor>,
    ) -> Result<Self, PyramidError> {
        let count = levels.first().map(|l| l.rows()).unwrap_or(0);
        let template = Self::zeros_batch(spec, target, count.max(1))?;
        if levels.len() != template.levels.len() {
            return Err(PyramidError::ShapeMismatch(format!(
                "expected {} levels, got {}",
                template.levels.len(),
                levels.len()
            )));
        }
        for (got, want) in levels.iter().zip(&template.levels) {
            if got.shape() != want.shape() {
                return Err(PyramidError::ShapeMismatch(format!(
                    "level shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self {
            spec: template.spec,
            levels,
            target,
        })
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.spec
    }

    pub fn target(&self) -> ImageShape {
        self.target
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Tensor] {
        &mut self.levels
    }

    /// Number of independent patterns.
    pub fn count(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|l| (l.shape()[1], l.shape()[2], l.shape()[3]))
            .collect()
    }

    /// Full-resolution perturbation of shape `[count, H, W, C]`.
    pub fn materialize(&self, radius: f64) -> Result<Tensor, PyramidError> {
        check_radius(radius)?;
        let t = self.target;
        let count = self.count();
        let mut out = Tensor::zeros(&[count, t.height, t.width, t.channels]);
        for ((level, &s), &m) in self
            .levels
            .iter()
            .zip(&self.spec.scales)
            .zip(&self.spec.multipliers)
        {
            let index = tile_index(t, s, self.spec.per_channel, count, count);
            let lv = level.data();
            for (o, &i) in out.data_mut().iter_mut().zip(index.iter()) {
                *o += m * lv[i].clamp(-radius, radius);
            }
        }
        Ok(out)
    }

    /// Clamps every stored level value into `[-radius, radius]`.
    pub fn project(&mut self, radius: f64) -> Result<(), PyramidError> {
        check_radius(radius)?;
        for level in &mut self.levels {
            for v in level.data_mut() {
                *v = v.clamp(-radius, radius);
            }
        }
        Ok(())
    }

    pub fn projected(&self, radius: f64) -> Result<Self, PyramidError> {
        let mut p = self.clone();
        p.project(radius)?;
        Ok(p)
    }

    /// `level <- project(level + tau * sign(grad), radius)` for every level,
    /// with `sign(0) = 0`.
    pub fn sign_ascent_update(
        &mut self,
        grads: &[Tensor],
        tau: f64,
        radius: f64,
    ) -> Result<(), PyramidError> {
        check_radius(radius)?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(PyramidError::InvalidSpec(format!("step size must be positive, got {tau}")));
        }
        if grads.len() != self.levels.len() {
            return Err(PyramidError::ShapeMismatch(format!(
                "{} gradients for {} levels",
                grads.len(),
                self.levels.len()
            )));
        }
        for ((level, grad), &scale) in self.levels.iter().zip(grads).zip(&self.spec.scales) {
            if level.shape() != grad.shape() {
                return Err(PyramidError::ShapeMismatch(format!(
                    "gradient shape {:?} for level {:?} at scale {scale}",
                    grad.shape(),
                    level.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(PyramidError::NonFiniteGradient { scale });
            }
        }
        for (level, grad) in self.levels.iter_mut().zip(grads) {
            for (v, &g) in level.data_mut().iter_mut().zip(grad.data()) {
                let step = if g > 0.0 {
                    tau
                } else if g < 0.0 {
                    -tau
                } else {
                    0.0
                };
                *v = (*v + step).clamp(-radius, radius);
            }
        }
        Ok(())
    }

    /// Registers the levels as graph leaves.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.levels
            .iter()
            .map(|l| g.leaf(l.clone(), requires_grad))
            .collect()
    }

    /// Differentiable materialization of bound levels into `[count, H, W, C]`.
    pub fn materialize_in_graph(
        &self,
        g: &mut Graph,
        levels: &[Var],
        radius: f64,
    ) -> Result<Var, PyramidError> {
        check_radius(radius)?;
        let t = self.target;
        let count = self.count();
        let shape = [count, t.height, t.width, t.channels];
        let mut total: Option<Var> = None;
        for ((&level, &s), &m) in levels
            .iter()
            .zip(&self.spec.scales)
            .zip(&self.spec.multipliers)
        {
            let clipped = g.clamp(level, -radius, radius);
            let scaled = g.scale(clipped, m);
            let index = Arc::new(tile_index(t, s, self.spec.per_channel, count, count));
            let full = g.gather(scaled, index, &shape);
            total = Some(match total {
                Some(acc) => g.add(acc, full),
                None => full,
            });
        }
        Ok(total.expect("validated spec has at least one scale"))
    }

    /// Adds the materialized perturbation to a `[batch, H, W, C]` image batch and
    /// clamps pixels into `[0, 1]`. A single pattern is shared by every image;
    /// otherwise the pattern count must equal the batch size.
    pub fn perturb_in_graph(
        &self,
        g: &mut Graph,
        levels: &[Var],
        images: Var,
        radius: f64,
    ) -> Result<Var, PyramidError> {
        let ishape = g.shape(images).to_vec();
        let t = self.target;
        if ishape.len() != 4 || ishape[1..] != t.dims() {
            return Err(PyramidError::ShapeMismatch(format!(
                "images {:?} vs perturbation target {:?}",
                ishape, t
            )));
        }
        let delta = self.materialize_in_graph(g, levels, radius)?;
        let summed = if self.count() == 1 {
            let delta = g.reshape(delta, &t.dims());
            g.add_broadcast(images, delta)
        } else if self.count() == ishape[0] {
            g.add(images, delta)
        } else {
            return Err(PyramidError::ShapeMismatch(format!(
                "{} patterns for a batch of {}",
                self.count(),
                ishape[0]
            )));
        };
        Ok(g.clamp(summed, 0.0, 1.0))
    }

    /// Non-graph counterpart of [`Self::perturb_in_graph`].
    pub fn perturb(&self, images: &Tensor, radius: f64) -> Result<Tensor, PyramidError> {
        let t = self.target;
        let s = images.shape();
        if s.len() != 4 || s[1..] != t.dims() {
            return Err(PyramidError::ShapeMismatch(format!(
                "images {:?} vs perturbation target {:?}",
                s, t
            )));
        }
        if self.count() != 1 && self.count() != s[0] {
            return Err(PyramidError::ShapeMismatch(format!(
                "{} patterns for a batch of {}",
                self.count(),
                s[0]
            )));
        }
        let delta = self.materialize(radius)?;
        let per = t.pixels();
        let mut out = images.clone();
        for (b, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let d = if self.count() == 1 { 0 } else { b };
            for (o, dv) in chunk.iter_mut().zip(&delta.data()[d * per..(d + 1) * per]) {
                *o = (*o + dv).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

fn check_radius(radius: f64) -> Result<(), PyramidError> {
    if radius.is_finite() && radius >= 0.0 {
        Ok(())
    } else {
        Err(PyramidError::InvalidRadius(radius))
    }
}

/// For every output pixel of `[out_count, H, W, C]`, the flat index of the level
/// parameter it reads in a `[level_count, rows, cols, channels]` grid.
///
/// `level_count` must be 1 (shared) or equal to `out_count`.
pub fn tile_index(
    shape: ImageShape,
    scale: usize,
    per_channel: bool,
    level_count: usize,
    out_count: usize,
) -> Vec<usize> {
    let (rows, cols, ch) = level_grid(shape, scale, per_channel);
    let mut index = Vec::with_capacity(out_count * shape.pixels());
    for b in 0..out_count {
        let base = if level_count == 1 { 0 } else { b * rows * cols * ch };
        for y in 0..shape.height {
            let row = base + (y / scale) * cols * ch;
            for x in 0..shape.width {
                let cell = row + (x / scale) * ch;
                for c in 0..shape.channels {
                    index.push(cell + if per_channel { c } else { 0 });
                }
            }
        }
    }
    index
}
