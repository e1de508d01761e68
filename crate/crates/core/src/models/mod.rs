//! Differentiable classifiers.
//!
//! Every model implements [`Classifier`]: it owns a [`ParamStore`] of named
//! tensors and knows how to append its forward computation to a [`Graph`].
//! Gradients with respect to parameters and inputs both come out of a single
//! [`Graph::backward`] call.

mod mlp;
mod vit;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::pyramid::ImageShape;
use crate::tensor::Tensor;

pub use mlp::{Mlp, MlpConfig};
pub use vit::{TinyVit, VitConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite values after layer `{layer}`")]
    NonFinite { layer: String },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Role of a parameter tensor. Drives weight decay and filter normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Linear weight stored `[out, in]`; each row is one filter.
    Weight,
    Bias,
    /// LayerNorm scale or shift.
    Norm,
    /// Positional embedding or class token.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// A differentiable image classifier.
pub trait Classifier {
    fn image_shape(&self) -> ImageShape;
    fn num_classes(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Appends the forward pass for `[batch, H, W, C]` images to `g` and returns
    /// `[batch, classes]` logits. `params` are the vars produced by
    /// [`ParamStore::bind`] on this model's store.
    fn build_logits(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<Var, ModelError>;
}

/// Architecture description, enough to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    TinyVit(VitConfig),
    Mlp(MlpConfig),
}

impl ArchConfig {
    pub fn image_shape(&self) -> ImageShape {
        match self {
            ArchConfig::TinyVit(c) => c.image,
            ArchConfig::Mlp(c) => c.image,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchConfig::TinyVit(c) => c.num_classes,
            ArchConfig::Mlp(c) => c.num_classes,
        }
    }
}

/// The concrete model zoo.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    TinyVit(TinyVit),
    Mlp(Mlp),
}

impl Model {
    pub fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Result<Self, ModelError> {
        Ok(match arch {
            ArchConfig::TinyVit(c) => Model::TinyVit(TinyVit::new(c.clone(), rng)?),
            ArchConfig::Mlp(c) => Model::Mlp(Mlp::new(c.clone(), rng)?),
        })
    }

    /// Rebuilds a model around stored parameters, validating names and shapes.
    pub fn from_params(arch: &ArchConfig, params: ParamStore) -> Result<Self, ModelError> {
        // layout template; deterministic rng, values discarded
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(arch, &mut rng)?;
        let template = model.params();
        if template.len() != params.len()
            || template
                .iter()
                .zip(params.iter())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape() || a.kind != b.kind)
        {
            return Err(ModelError::InvalidArch(
                "stored parameters do not match the architecture".into(),
            ));
        }
        *model.params_mut() = params;
        Ok(model)
    }

    pub fn arch(&self) -> ArchConfig {
        match self {
            Model::TinyVit(m) => ArchConfig::TinyVit(m.config().clone()),
            Model::Mlp(m) => ArchConfig::Mlp(m.config().clone()),
        }
    }
}

impl Classifier for Model {
    fn image_shape(&self) -> ImageShape {
        match self {
            Model::TinyVit(m) => m.image_shape(),
            Model::Mlp(m) => m.image_shape(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Model::TinyVit(m) => m.num_classes(),
            Model::Mlp(m) => m.num_classes(),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            Model::TinyVit(m) => m.params(),
            Model::Mlp(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::TinyVit(m) => m.params_mut(),
            Model::Mlp(m) => m.params_mut(),
        }
    }

    fn build_logits(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<Var, ModelError> {
        match self {
            Model::TinyVit(m) => m.build_logits(g, params, images),
            Model::Mlp(m) => m.build_logits(g, params, images),
        }
    }
}

/// Loss and logits of one forward pass.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub logits: Tensor,
}

pub(crate) fn check_batch<M: Classifier + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: Option<&[usize]>,
) -> Result<(), ModelError> {
    let expected = model.image_shape().dims();
    let s = images.shape();
    if s.len() != 4 || s[1..] != expected {
        return Err(ModelError::InputShape {
            got: s.to_vec(),
            expected: expected.to_vec(),
        });
    }
    if s[0] == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if let Some(labels) = labels {
        if labels.len() != s[0] {
            return Err(ModelError::InputShape {
                got: vec![labels.len()],
                expected: vec![s[0]],
            });
        }
        let classes = model.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::LabelOutOfRange { label, classes });
        }
    }
    Ok(())
}

pub(crate) fn ensure_finite(g: &Graph, v: Var, layer: &str) -> Result<(), ModelError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            layer: layer.to_string(),
        })
    }
}

/// Mean cross-entropy and logits on a batch.
pub fn forward_loss<M: Classifier + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
) -> Result<LossOutput, ModelError> {
    check_batch(model, images, Some(labels))?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(images.clone());
    let logits = model.build_logits(&mut g, &p, x)?;
    let loss = g.cross_entropy(logits, labels);
    ensure_finite(&g, loss, "cross_entropy")?;
    Ok(LossOutput {
        loss: g.value(loss).data()[0],
        logits: g.value(logits).clone(),
    })
}

/// Gradient of the mean cross-entropy with respect to the input pixels.
pub fn input_gradient<M: Classifier + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
) -> Result<Tensor, ModelError> {
    check_batch(model, images, Some(labels))?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.leaf(images.clone(), true);
    let logits = model.build_logits(&mut g, &p, x)?;
    let loss = g.cross_entropy(logits, labels);
    ensure_finite(&g, loss, "cross_entropy")?;
    let mut grads = g.backward(loss);
    Ok(grads.take(x).expect("input leaf is tracked"))
}

/// Logits for a batch without gradient tracking, evaluated in chunks.
pub fn predict_logits<M: Classifier + ?Sized>(
    model: &M,
    images: &Tensor,
    chunk: usize,
) -> Result<Tensor, ModelError> {
    check_batch(model, images, None)?;
    let n = images.rows();
    let k = model.num_classes();
    let mut out = Vec::with_capacity(n * k);
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let x = g.constant(images.slice_rows(start, end));
        let logits = model.build_logits(&mut g, &p, x)?;
        out.extend_from_slice(g.value(logits).data());
        start = end;
    }
    Ok(Tensor::from_vec(&[n, k], out))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Xavier/Glorot-uniform `[out, in]` matrix.
pub(crate) fn xavier<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (out + inp) as f64).sqrt();
    Tensor::from_vec(
        &[out, inp],
        (0..out * inp).map(|_| rng.random_range(-a..a)).collect(),
    )
}

pub(crate) fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}
