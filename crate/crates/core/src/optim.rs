//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::models::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_epochs: 8,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Decoupled-weight-decay Adam. Weight decay only touches linear weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &ParamStore, steps_per_epoch: u64, epochs: u64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            warmup_steps: config.warmup_epochs as u64 * steps_per_epoch,
            total_steps: (epochs * steps_per_epoch).max(1),
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// Restores a mid-run optimizer.
    pub fn from_state(
        config: OptimizerConfig,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
        step: u64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Self {
        Self {
            config,
            first,
            second,
            step,
            warmup_steps,
            total_steps,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Learning rate used for the update with zero-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let lr = self.config.lr;
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let lr = self.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let decay = if p.kind == ParamKind::Weight {
                lr * c.weight_decay
            } else {
                0.0
            };
            let pv = p.value.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pv.len() {
                let gi = g.data()[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let update = (md[i] / bias1) / ((vd[i] / bias2).sqrt() + c.eps);
                pv[i] -= lr * update + decay * pv[i];
            }
        }
    }
}
