use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ensure_finite, xavier, Classifier, ModelError, ParamKind, ParamStore};
use crate::graph::{Graph, Var};
use crate::pyramid::ImageShape;
use crate::tensor::Tensor;

/// One-hidden-layer GELU perceptron over flattened pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub image: ImageShape,
    pub hidden: usize,
    pub num_classes: usize,
    /// Flat `HWC` pixel indices the network never reads.
    #[serde(default)]
    pub masked_inputs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    params: ParamStore,
    kept: Option<Arc<Vec<usize>>>,
}

impl Mlp {
    pub fn new<R: Rng>(config: MlpConfig, rng: &mut R) -> Result<Self, ModelError> {
        let n = config.image.pixels();
        if n == 0 || config.hidden == 0 || config.num_classes < 2 {
            return Err(ModelError::InvalidArch(
                "mlp needs a non-empty image, hidden width and >= 2 classes".into(),
            ));
        }
        if let Some(&bad) = config.masked_inputs.iter().find(|&&i| i >= n) {
            return Err(ModelError::InvalidArch(format!("masked input {bad} out of range")));
        }
        let kept: Vec<usize> = (0..n).filter(|i| !config.masked_inputs.contains(i)).collect();
        let fan_in = kept.len();
        let mut ps = ParamStore::default();
        ps.push("fc1.weight", ParamKind::Weight, xavier(config.hidden, fan_in, rng));
        ps.push("fc1.bias", ParamKind::Bias, Tensor::zeros(&[config.hidden]));
        ps.push("fc2.weight", ParamKind::Weight, xavier(config.num_classes, config.hidden, rng));
        ps.push("fc2.bias", ParamKind::Bias, Tensor::zeros(&[config.num_classes]));
        let kept = (fan_in != n).then(|| Arc::new(kept));
        Ok(Self {
            config,
            params: ps,
            kept,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }
}

impl Classifier for Mlp {
    fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn build_logits(&self, g: &mut Graph, p: &[Var], images: Var) -> Result<Var, ModelError> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1..] != self.config.image.dims() {
            return Err(ModelError::InputShape {
                got: s,
                expected: self.config.image.dims().to_vec(),
            });
        }
        let batch = s[0];
        let n = self.config.image.pixels();
        let x = match &self.kept {
            Some(kept) => {
                let index: Vec<usize> = (0..batch)
                    .flat_map(|b| kept.iter().map(move |&i| b * n + i))
                    .collect();
                g.gather(images, Arc::new(index), &[batch, kept.len()])
            }
            None => g.reshape(images, &[batch, n]),
        };
        let h = g.linear(x, p[0], Some(p[1]));
        let h = g.gelu(h);
        ensure_finite(g, h, "fc1")?;
        let logits = g.linear(h, p[2], Some(p[3]));
        ensure_finite(g, logits, "fc2")?;
        Ok(logits)
    }
}
