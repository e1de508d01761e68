//! Inner maximizers: the multi-step sample-wise pyramid attack, the
//! free-gradient universal update, and the radius schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostLedger;
use crate::graph::Graph;
use crate::models::{check_batch, ensure_finite, Classifier, ModelError};
use crate::pyramid::{PyramidError, PyramidPerturbation, PyramidSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite adversarial loss at attack step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
}

/// Linear radius decay between two epochs.
///
/// `r(e) = r_start + (r_end - r_start) * max(e - e_start, 0) / (e_end - e_start)`,
/// held at `r_end` after `e_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusSchedule {
    pub r_start: f64,
    pub r_end: f64,
    pub e_start: usize,
    pub e_end: usize,
    pub enabled: bool,
}

impl RadiusSchedule {
    /// Constant radius.
    pub fn constant(radius: f64) -> Self {
        Self {
            r_start: radius,
            r_end: radius,
            e_start: 0,
            e_end: 1,
            enabled: false,
        }
    }

    /// Decay to 10% of `radius` from `e_start` until `total_epochs`.
    pub fn decay_to_tenth(radius: f64, e_start: usize, total_epochs: usize) -> Self {
        Self {
            r_start: radius,
            r_end: 0.1 * radius,
            e_start,
            e_end: total_epochs.max(e_start + 1),
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), AdversaryError> {
        if !(self.r_start >= self.r_end && self.r_end >= 0.0 && self.r_start.is_finite()) {
            return Err(AdversaryError::InvalidConfig(format!(
                "radius schedule needs r_start >= r_end >= 0 (got {} -> {})",
                self.r_start, self.r_end
            )));
        }
        if self.e_end <= self.e_start {
            return Err(AdversaryError::InvalidConfig(format!(
                "radius schedule needs e_end > e_start (got {} -> {})",
                self.e_start, self.e_end
            )));
        }
        Ok(())
    }

    pub fn radius_at_epoch(&self, epoch: usize) -> f64 {
        if !self.enabled {
            return self.r_start;
        }
        if epoch >= self.e_end {
            return self.r_end;
        }
        let progress = epoch.saturating_sub(self.e_start) as f64 / (self.e_end - self.e_start) as f64;
        self.r_start + (self.r_end - self.r_start) * progress
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSizeRule {
    Explicit(f64),
    /// `radius / num_steps`.
    RadiusOverSteps,
}

/// Configuration of the sample-wise multi-step attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub num_steps: usize,
    pub spec: PyramidSpec,
    pub random_init: bool,
    pub step_size_rule: StepSizeRule,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        if self.num_steps == 0 {
            return Err(AdversaryError::InvalidConfig("num_steps must be >= 1".into()));
        }
        if let StepSizeRule::Explicit(t) = self.step_size_rule {
            if !(t.is_finite() && t > 0.0) {
                return Err(AdversaryError::InvalidConfig(format!("step size must be positive, got {t}")));
            }
        }
        self.spec.validate()?;
        Ok(())
    }

    pub fn step_size(&self, radius: f64) -> f64 {
        match self.step_size_rule {
            StepSizeRule::Explicit(t) => t,
            StepSizeRule::RadiusOverSteps => radius / self.num_steps as f64,
        }
    }
}

/// Result of a sample-wise attack.
#[derive(Clone, Debug)]
pub struct SampleAttack {
    /// One pattern per sample.
    pub perturbation: PyramidPerturbation,
    /// `clamp(x + delta, 0, 1)`.
    pub perturbed: Tensor,
}

/// Multi-step sign-gradient ascent on a per-sample pyramid perturbation.
///
/// Each iteration is one forward and backward pass over the batch and is
/// recorded as a generation pass. Model parameters are only read.
pub fn pgd_pyramid_attack<M, R>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    radius: f64,
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<SampleAttack, AdversaryError>
where
    M: Classifier + ?Sized,
    R: Rng,
{
    cfg.validate()?;
    check_batch(model, images, Some(labels))?;
    let batch = images.rows();
    let shape = model.image_shape();
    let mut pert = if cfg.random_init {
        PyramidPerturbation::uniform_batch(cfg.spec.clone(), shape, batch, radius, rng)?
    } else {
        PyramidPerturbation::zeros_batch(cfg.spec.clone(), shape, batch)?
    };
    let tau = cfg.step_size(radius);
    for step in 0..cfg.num_steps {
        let mut g = Graph::new();
        let params = model.params().bind(&mut g, false);
        let levels = pert.bind(&mut g, true);
        let x = g.constant(images.clone());
        let x_adv = pert.perturb_in_graph(&mut g, &levels, x, radius)?;
        let logits = model.build_logits(&mut g, &params, x_adv)?;
        let loss = g.cross_entropy(logits, labels);
        if ensure_finite(&g, loss, "cross_entropy").is_err() {
            return Err(AdversaryError::NonFiniteLoss { step });
        }
        let mut grads = g.backward(loss);
        ledger.record_generation_pass();
        let level_grads: Vec<Tensor> = levels
            .iter()
            .map(|&v| grads.take(v).expect("levels are tracked"))
            .collect();
        if tau > 0.0 {
            pert.sign_ascent_update(&level_grads, tau, radius)?;
        }
    }
    let perturbed = pert.perturb(images, radius)?;
    Ok(SampleAttack {
        perturbation: pert,
        perturbed,
    })
}

/// Free-gradient ascent step on the shared universal perturbation, followed by
/// projection onto the scheduled radius for `epoch`. Performs no passes.
pub fn universal_update(
    state: &mut PyramidPerturbation,
    level_grads: &[Tensor],
    schedule: &RadiusSchedule,
    epoch: usize,
    tau: f64,
) -> Result<(), AdversaryError> {
    let radius = schedule.radius_at_epoch(epoch);
    state.sign_ascent_update(level_grads, tau, radius)?;
    Ok(())
}
