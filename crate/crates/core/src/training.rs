//! Training loops: clean, sample-wise pyramid adversarial, and universal
//! pyramid adversarial training with free perturbation gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    pgd_pyramid_attack, universal_update, AdversaryError, AttackConfig, RadiusSchedule,
    StepSizeRule,
};
use crate::cost::{CostLedger, PassCostReport};
use crate::data::{augment, AugmentConfig, Dataset, Splits};
use crate::graph::{Graph, Var};
use crate::models::{
    argmax_rows, check_batch, ensure_finite, predict_logits, ArchConfig, Classifier, Model,
    ModelError,
};
use crate::optim::{AdamW, OptimizerConfig};
use crate::pyramid::{PyramidError, PyramidPerturbation, PyramidSpec};
use crate::tensor::Tensor;

/// Version of the per-epoch metrics record layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("non-finite training loss")]
    NonFiniteLoss,
    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

impl TrainError {
    /// True when the failure is numeric (NaN/inf) rather than a setup problem.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFiniteLoss => true,
            TrainError::Model(ModelError::NonFinite { .. }) => true,
            TrainError::Adversary(AdversaryError::NonFiniteLoss { .. })
            | TrainError::Adversary(AdversaryError::Model(ModelError::NonFinite { .. }))
            | TrainError::Adversary(AdversaryError::Pyramid(PyramidError::NonFiniteGradient { .. })) => true,
            TrainError::Pyramid(PyramidError::NonFiniteGradient { .. }) => true,
            TrainError::Step { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Pat,
    Upat,
    /// Universal training with a single full-resolution level.
    UpatFlat,
    /// Universal training on the perturbed half only.
    UpatNoClean,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Pat,
        Method::Upat,
        Method::UpatFlat,
        Method::UpatNoClean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Pat => "pat",
            Method::Upat => "upat",
            Method::UpatFlat => "upat_flat",
            Method::UpatNoClean => "upat_no_clean",
        }
    }

    pub fn is_universal(self) -> bool {
        matches!(self, Method::Upat | Method::UpatFlat | Method::UpatNoClean)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight of the adversarial term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Pyramid layout for every method, plus step count and step size for the
    /// sample-wise attack.
    pub attack: AttackConfig,
    pub schedule: RadiusSchedule,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Ascent step of the universal pattern; defaults to a tenth of the
    /// current radius.
    #[serde(default)]
    pub universal_step: Option<f64>,
    /// Rows per forward when measuring accuracy.
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
}

fn default_eval_chunk() -> usize {
    256
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.optimizer.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.optimizer.warmup_epochs, self.epochs
            ));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return bad("learning rate must be finite and >= 0".into());
        }
        if let Some(t) = self.universal_step {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("universal_step must be positive, got {t}"));
            }
        }
        self.attack.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    /// Pyramid used by this method: single level for the flat ablation.
    pub fn effective_spec(&self) -> PyramidSpec {
        let spec = &self.attack.spec;
        match self.method {
            Method::UpatFlat => PyramidSpec {
                scales: vec![1],
                multipliers: vec![1.0],
                ..spec.clone()
            },
            _ => spec.clone(),
        }
    }

    pub fn radius_at_epoch(&self, epoch: usize) -> f64 {
        self.schedule.radius_at_epoch(epoch)
    }

    pub fn universal_step_at(&self, radius: f64) -> f64 {
        self.universal_step.unwrap_or(radius / 10.0)
    }
}

/// Per-step summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub clean_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub batch: usize,
    pub clean_correct: Option<usize>,
    pub adv_correct: Option<usize>,
}

/// Output of a universal step. `level_grads` are the free perturbation
/// gradients harvested from the training backward.
#[derive(Clone, Debug)]
pub struct UniversalStep {
    pub metrics: StepMetrics,
    pub level_grads: Vec<Tensor>,
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

fn param_grads(g: &Graph, grads: &mut crate::graph::Gradients, params: &[Var]) -> Vec<Tensor> {
    params
        .iter()
        .map(|&p| {
            grads
                .take(p)
                .unwrap_or_else(|| Tensor::zeros(g.shape(p)))
        })
        .collect()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn check_loss(g: &Graph, v: Var) -> Result<(), TrainError> {
    ensure_finite(g, v, "loss").map_err(|_| TrainError::NonFiniteLoss)
}

/// One optimizer step on the clean cross-entropy.
pub fn train_step_baseline<M: Classifier + ?Sized>(
    model: &mut M,
    images: &Tensor,
    labels: &[usize],
    opt: &mut AdamW,
    ledger: &mut CostLedger,
) -> Result<StepMetrics, TrainError> {
    check_batch(model, images, Some(labels))?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let x = g.constant(images.clone());
    let logits = model.build_logits(&mut g, &p, x)?;
    let loss = g.cross_entropy(logits, labels);
    check_loss(&g, loss)?;
    let mut grads = g.backward(loss);
    ledger.record_train_forward(1);
    ledger.record_train_backward(1);
    ledger.finish_step();
    let pg = param_grads(&g, &mut grads, &p);
    opt.apply(model.params_mut(), &pg);
    Ok(StepMetrics {
        loss: scalar(&g, loss),
        clean_loss: Some(scalar(&g, loss)),
        adv_loss: None,
        batch: labels.len(),
        clean_correct: Some(correct(g.value(logits), labels)),
        adv_correct: None,
    })
}

/// Forward of `[clean; perturbed]` as one doubled batch, mean loss per half,
/// `clean + lambda * adv`.
fn combined_loss<M: Classifier + ?Sized>(
    model: &M,
    g: &mut Graph,
    params: &[Var],
    clean: Var,
    perturbed: Var,
    labels: &[usize],
    lambda: f64,
) -> Result<(Var, Var, Var, Var), TrainError> {
    let b = labels.len();
    let both = g.concat_rows(clean, perturbed);
    let logits = model.build_logits(g, params, both)?;
    let lc = g.slice_rows(logits, 0, b);
    let la = g.slice_rows(logits, b, 2 * b);
    let clean_loss = g.cross_entropy(lc, labels);
    let adv_loss = g.cross_entropy(la, labels);
    let weighted = g.scale(adv_loss, lambda);
    let total = g.add(clean_loss, weighted);
    Ok((total, clean_loss, adv_loss, logits))
}

/// Sample-wise pyramid adversarial step: a fresh multi-step attack, then one
/// combined pass over the clean and adversarial halves.
#[allow(clippy::too_many_arguments)]
pub fn train_step_pat<M: Classifier + ?Sized, R: rand::Rng>(
    model: &mut M,
    images: &Tensor,
    labels: &[usize],
    opt: &mut AdamW,
    cfg: &TrainConfig,
    radius: f64,
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<StepMetrics, TrainError> {
    if cfg.method != Method::Pat {
        return Err(TrainError::InvalidConfig(format!(
            "sample-wise step called for method {}",
            cfg.method
        )));
    }
    check_batch(model, images, Some(labels))?;
    let attack = pgd_pyramid_attack(&*model, images, labels, &cfg.attack, radius, rng, ledger)?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let x = g.constant(images.clone());
    let xa = g.constant(attack.perturbed);
    let (total, cl, al, logits) = combined_loss(&*model, &mut g, &p, x, xa, labels, cfg.lambda)?;
    check_loss(&g, total)?;
    let mut grads = g.backward(total);
    ledger.record_train_forward(2);
    ledger.record_train_backward(2);
    ledger.finish_step();
    let pg = param_grads(&g, &mut grads, &p);
    opt.apply(model.params_mut(), &pg);
    let b = labels.len();
    let lv = g.value(logits);
    Ok(StepMetrics {
        loss: scalar(&g, total),
        clean_loss: Some(scalar(&g, cl)),
        adv_loss: Some(scalar(&g, al)),
        batch: b,
        clean_correct: Some(correct(&lv.slice_rows(0, b), labels)),
        adv_correct: Some(correct(&lv.slice_rows(b, 2 * b), labels)),
    })
}

/// Universal step: materialize the shared pattern, one combined
/// forward/backward, descend on the parameters, then ascend on the pattern
/// with the gradients of that same backward.
///
/// `UpatNoClean` forwards only the perturbed half (one unit instead of two).
#[allow(clippy::too_many_arguments)]
pub fn train_step_upat<M: Classifier + ?Sized>(
    model: &mut M,
    images: &Tensor,
    labels: &[usize],
    state: &mut PyramidPerturbation,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    epoch: usize,
    ledger: &mut CostLedger,
) -> Result<UniversalStep, TrainError> {
    if !cfg.method.is_universal() {
        return Err(TrainError::InvalidConfig(format!(
            "universal step called for method {}",
            cfg.method
        )));
    }
    check_batch(model, images, Some(labels))?;
    if state.count() != 1 || state.target() != model.image_shape() {
        return Err(TrainError::Pyramid(PyramidError::ShapeMismatch(format!(
            "universal state {:?} x{} vs model input {:?}",
            state.target(),
            state.count(),
            model.image_shape()
        ))));
    }
    let radius = cfg.radius_at_epoch(epoch);
    let b = labels.len();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let levels = state.bind(&mut g, true);
    let x = g.constant(images.clone());
    let xa = state.perturb_in_graph(&mut g, &levels, x, radius)?;
    let (total, clean_loss, adv_loss, clean_correct, adv_correct, mult) =
        if cfg.method == Method::UpatNoClean {
            let logits = model.build_logits(&mut g, &p, xa)?;
            let al = g.cross_entropy(logits, labels);
            let adv_correct = correct(g.value(logits), labels);
            (al, None, al, None, adv_correct, 1)
        } else {
            let (total, cl, al, logits) = combined_loss(&*model, &mut g, &p, x, xa, labels, cfg.lambda)?;
            let lv = g.value(logits);
            let cc = correct(&lv.slice_rows(0, b), labels);
            let ac = correct(&lv.slice_rows(b, 2 * b), labels);
            (total, Some(cl), al, Some(cc), ac, 2)
        };
    check_loss(&g, total)?;
    let mut grads = g.backward(total);
    ledger.record_train_forward(mult);
    ledger.record_train_backward(mult);
    ledger.finish_step();
    let pg = param_grads(&g, &mut grads, &p);
    let level_grads: Vec<Tensor> = levels
        .iter()
        .map(|&v| grads.take(v).expect("levels are tracked"))
        .collect();
    opt.apply(model.params_mut(), &pg);
    let tau = cfg.universal_step_at(radius);
    if tau > 0.0 {
        universal_update(state, &level_grads, &cfg.schedule, epoch, tau)?;
    }
    Ok(UniversalStep {
        metrics: StepMetrics {
            loss: scalar(&g, total),
            clean_loss: clean_loss.map(|v| scalar(&g, v)),
            adv_loss: Some(scalar(&g, adv_loss)),
            batch: b,
            clean_correct,
            adv_correct: Some(adv_correct),
        },
        level_grads,
    })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub method: Method,
    pub radius: f64,
    pub train_loss: f64,
    pub clean_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    /// Running accuracy on the (augmented) clean training batches.
    pub train_clean_acc: Option<f64>,
    pub val_clean_acc: Option<f64>,
    /// Error increase caused by the training adversary, measured on the
    /// training batches of this epoch.
    pub adv_err_increase: Option<f64>,
    pub steps: u64,
    pub cumulative_units: f64,
}

/// Everything a run owns; a checkpoint is a serialization of this.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: Model,
    pub optimizer: AdamW,
    pub universal: Option<PyramidPerturbation>,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub ledger: CostLedger,
    pub history: Vec<EpochRecord>,
}

impl TrainerState {
    pub fn cost_report(&self, method: Method) -> PassCostReport {
        self.ledger.report(method.name())
    }
}

pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> usize {
    (train_len / batch_size).max(1)
}

/// Fresh state: model initialised from the seed, zero universal pattern.
pub fn init_state(cfg: &TrainConfig, arch: &ArchConfig, train_len: usize) -> Result<TrainerState, TrainError> {
    cfg.validate()?;
    if train_len == 0 {
        return Err(TrainError::InvalidConfig("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(arch, &mut rng)?;
    let spe = steps_per_epoch(train_len, cfg.batch_size) as u64;
    let optimizer = AdamW::new(cfg.optimizer.clone(), model.params(), spe, cfg.epochs as u64);
    let universal = if cfg.method.is_universal() {
        Some(PyramidPerturbation::init_zeros(cfg.effective_spec(), arch.image_shape())?)
    } else {
        None
    };
    Ok(TrainerState {
        model,
        optimizer,
        universal,
        rng,
        epochs_done: 0,
        ledger: CostLedger::new(),
        history: Vec::new(),
    })
}

/// Clean accuracy of a model on a dataset.
pub(crate) fn accuracy<M: Classifier + ?Sized>(model: &M, data: &Dataset, chunk: usize) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let logits = predict_logits(model, &data.images, chunk)?;
    Ok(correct(&logits, &data.labels) as f64 / data.len() as f64)
}

/// Runs epochs `state.epochs_done + 1 ..= cfg.epochs`, calling `on_epoch` after
/// each one (for checkpoints and metric streaming).
pub fn run_training<F>(
    cfg: &TrainConfig,
    splits: &Splits,
    state: &mut TrainerState,
    mut on_epoch: F,
) -> Result<(), TrainError>
where
    F: FnMut(&TrainerState, &EpochRecord) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let train = &splits.train;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("empty training split".into()));
    }
    let batch = cfg.batch_size.min(train.len());
    let spe = steps_per_epoch(train.len(), batch);
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done + 1;
        let radius = cfg.radius_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut acc = Accum::default();
        for step in 0..spe {
            let idx = &order[step * batch..(step + 1) * batch];
            let images = augment(&train.images.select_rows(idx), &cfg.augment, &mut state.rng);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let metrics = match cfg.method {
                Method::Baseline => train_step_baseline(
                    &mut state.model,
                    &images,
                    &labels,
                    &mut state.optimizer,
                    &mut state.ledger,
                ),
                Method::Pat => train_step_pat(
                    &mut state.model,
                    &images,
                    &labels,
                    &mut state.optimizer,
                    cfg,
                    radius,
                    &mut state.rng,
                    &mut state.ledger,
                ),
                Method::Upat | Method::UpatFlat | Method::UpatNoClean => {
                    let universal = state
                        .universal
                        .as_mut()
                        .ok_or_else(|| TrainError::InvalidConfig("missing universal state".into()))?;
                    train_step_upat(
                        &mut state.model,
                        &images,
                        &labels,
                        universal,
                        &mut state.optimizer,
                        cfg,
                        epoch,
                        &mut state.ledger,
                    )
                    .map(|s| s.metrics)
                }
            }
            .map_err(|e| TrainError::Step {
                epoch,
                step,
                source: Box::new(e),
            })?;
            acc.add(&metrics);
        }
        let val_clean_acc = if splits.val.is_empty() {
            None
        } else {
            Some(accuracy(&state.model, &splits.val, cfg.eval_chunk)?)
        };
        let record = acc.record(epoch, cfg.method, radius, val_clean_acc, &state.ledger);
        state.epochs_done = epoch;
        state.history.push(record.clone());
        on_epoch(state, &record)?;
    }
    Ok(())
}

#[derive(Default)]
struct Accum {
    loss: f64,
    clean_loss: f64,
    adv_loss: f64,
    clean_terms: usize,
    adv_terms: usize,
    steps: usize,
    clean_seen: usize,
    clean_correct: usize,
    paired_seen: usize,
    paired_clean_correct: usize,
    paired_adv_correct: usize,
}

impl Accum {
    fn add(&mut self, m: &StepMetrics) {
        self.loss += m.loss;
        self.steps += 1;
        if let Some(c) = m.clean_loss {
            self.clean_loss += c;
            self.clean_terms += 1;
        }
        if let Some(a) = m.adv_loss {
            self.adv_loss += a;
            self.adv_terms += 1;
        }
        if let Some(c) = m.clean_correct {
            self.clean_seen += m.batch;
            self.clean_correct += c;
            if let Some(a) = m.adv_correct {
                self.paired_seen += m.batch;
                self.paired_clean_correct += c;
                self.paired_adv_correct += a;
            }
        }
    }

    fn record(
        &self,
        epoch: usize,
        method: Method,
        radius: f64,
        val_clean_acc: Option<f64>,
        ledger: &CostLedger,
    ) -> EpochRecord {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        EpochRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch,
            method,
            radius,
            train_loss: self.loss / self.steps.max(1) as f64,
            clean_loss: mean(self.clean_loss, self.clean_terms),
            adv_loss: mean(self.adv_loss, self.adv_terms),
            train_clean_acc: mean(self.clean_correct as f64, self.clean_seen),
            val_clean_acc,
            adv_err_increase: (self.paired_seen > 0).then(|| {
                (self.paired_clean_correct as f64 - self.paired_adv_correct as f64)
                    / self.paired_seen as f64
            }),
            steps: ledger.steps(),
            cumulative_units: ledger.total_units(),
        }
    }
}

/// Default attack for a method: the standard pyramid, `radius / steps` step
/// size and no random start.
pub fn default_attack(num_steps: usize, radius: f64) -> AttackConfig {
    AttackConfig {
        num_steps,
        spec: PyramidSpec::standard(radius, radius / num_steps.max(1) as f64),
        random_init: false,
        step_size_rule: StepSizeRule::RadiusOverSteps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synthetic_blobs, SyntheticSpec};
    use crate::models::{forward_loss, MlpConfig};
    use crate::pyramid::ImageShape;

    fn shape() -> ImageShape {
        ImageShape::new(8, 8, 3)
    }

    fn mlp_arch() -> ArchConfig {
        ArchConfig::Mlp(MlpConfig {
            image: shape(),
            hidden: 16,
            num_classes: 3,
            masked_inputs: vec![],
        })
    }

    fn small_spec(radius: f64) -> PyramidSpec {
        PyramidSpec {
            scales: vec![4, 2, 1],
            multipliers: vec![4.0, 2.0, 1.0],
            radius,
            step_size: radius / 2.0,
            per_channel: true,
        }
    }

    fn cfg(method: Method, steps: usize) -> TrainConfig {
        let r = 8.0 / 255.0;
        TrainConfig {
            method,
            lambda: 1.0,
            epochs: 2,
            batch_size: 16,
            optimizer: OptimizerConfig {
                warmup_epochs: 0,
                ..Default::default()
            },
            attack: AttackConfig {
                num_steps: steps,
                spec: small_spec(r),
                random_init: false,
                step_size_rule: StepSizeRule::RadiusOverSteps,
            },
            schedule: RadiusSchedule::constant(r),
            seed: 7,
            augment: AugmentConfig {
                flip: false,
                crop_padding: 0,
            },
            universal_step: None,
            eval_chunk: 64,
        }
    }

    fn batch(n: usize, seed: u64) -> Dataset {
        synthetic_blobs(&SyntheticSpec::new(n, 3, shape(), seed)).unwrap()
    }

    fn setup(c: &TrainConfig) -> TrainerState {
        init_state(c, &mlp_arch(), 16).unwrap()
    }

    #[test]
    fn ledger_units_per_method() {
        let d = batch(16, 1);
        let mut st = setup(&cfg(Method::Baseline, 1));
        let mut l = CostLedger::new();
        train_step_baseline(&mut st.model, &d.images, &d.labels, &mut st.optimizer, &mut l).unwrap();
        assert_eq!(l.report("baseline").total_units_per_step, 1.0);

        for k in 1..=5 {
            let c = cfg(Method::Pat, k);
            let mut st = setup(&c);
            let mut l = CostLedger::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            train_step_pat(&mut st.model, &d.images, &d.labels, &mut st.optimizer, &c, c.radius_at_epoch(1), &mut rng, &mut l)
                .unwrap();
            let r = l.report("pat");
            assert_eq!(r.total_units_per_step, (k + 2) as f64);
            assert_eq!(r.gen_passes_per_step, k as f64);
        }

        for (m, units) in [(Method::Upat, 2.0), (Method::UpatFlat, 2.0), (Method::UpatNoClean, 1.0)] {
            let c = cfg(m, 1);
            let mut st = setup(&c);
            let mut l = CostLedger::new();
            let mut u = st.universal.take().unwrap();
            train_step_upat(&mut st.model, &d.images, &d.labels, &mut u, &mut st.optimizer, &c, 1, &mut l).unwrap();
            let r = l.report(m.name());
            assert_eq!(r.total_units_per_step, units);
            assert_eq!(r.gen_passes_per_step, 0.0);
        }
    }

    #[test]
    fn baseline_loss_decreases_on_separable_data() {
        // class = brightest channel, with a wide margin
        let n = 48;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 3;
            for p in 0..64 {
                for c in 0..3 {
                    let base = 0.2 + 0.01 * ((i * 7 + p) % 5) as f64;
                    data.push(if c == label { base + 0.6 } else { base });
                }
            }
            labels.push(label);
        }
        let images = Tensor::from_vec(&[n, 8, 8, 3], data);
        let c = cfg(Method::Baseline, 1);
        let mut st = setup(&c);
        st.optimizer = AdamW::new(c.optimizer.clone(), st.model.params(), 50, 1);
        let before = forward_loss(&st.model, &images, &labels).unwrap().loss;
        let mut l = CostLedger::new();
        for _ in 0..50 {
            train_step_baseline(&mut st.model, &images, &labels, &mut st.optimizer, &mut l).unwrap();
        }
        let after = forward_loss(&st.model, &images, &labels).unwrap().loss;
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = batch(16, 2);
        let mut c = cfg(Method::Baseline, 1);
        c.optimizer.lr = 0.0;
        let mut st = setup(&c);
        let before = st.model.params().fingerprint();
        train_step_baseline(&mut st.model, &d.images, &d.labels, &mut st.optimizer, &mut CostLedger::new()).unwrap();
        assert_eq!(st.model.params().fingerprint(), before);
    }

    #[test]
    fn degenerate_pat_matches_baseline() {
        let d = batch(16, 3);
        let mut c = cfg(Method::Pat, 2);
        c.lambda = 0.0;
        let mut a = setup(&c);
        let mut b = setup(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step_pat(&mut a.model, &d.images, &d.labels, &mut a.optimizer, &c, 0.0, &mut rng, &mut CostLedger::new())
            .unwrap();
        train_step_baseline(&mut b.model, &d.images, &d.labels, &mut b.optimizer, &mut CostLedger::new()).unwrap();
        for (pa, pb) in a.model.params().iter().zip(b.model.params().iter()) {
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert!((x - y).abs() < 1e-12, "{}", pa.name);
            }
        }
    }

    #[test]
    fn zero_lambda_universal_state_is_untouched() {
        let d = batch(16, 4);
        let mut c = cfg(Method::Upat, 1);
        c.lambda = 0.0;
        let mut st = setup(&c);
        let mut base = setup(&cfg(Method::Baseline, 1));
        let mut u = st.universal.take().unwrap();
        let before = u.clone();
        let out = train_step_upat(&mut st.model, &d.images, &d.labels, &mut u, &mut st.optimizer, &c, 1, &mut CostLedger::new())
            .unwrap();
        assert_eq!(u, before);
        assert!(out.level_grads.iter().all(|g| g.max_abs() == 0.0));
        train_step_baseline(&mut base.model, &d.images, &d.labels, &mut base.optimizer, &mut CostLedger::new()).unwrap();
        for (pa, pb) in st.model.params().iter().zip(base.model.params().iter()) {
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn universal_step_moves_and_stays_in_ball() {
        let d = batch(16, 5);
        let c = cfg(Method::Upat, 1);
        let mut st = setup(&c);
        let mut u = st.universal.take().unwrap();
        let r = c.radius_at_epoch(1);
        for _ in 0..3 {
            train_step_upat(&mut st.model, &d.images, &d.labels, &mut u, &mut st.optimizer, &c, 1, &mut CostLedger::new())
                .unwrap();
        }
        let mx = u.levels().iter().map(|l| l.max_abs()).fold(0.0, f64::max);
        assert!(mx > 0.0 && mx <= r + 1e-15);
    }

    #[test]
    fn flat_ablation_uses_single_level() {
        let st = setup(&cfg(Method::UpatFlat, 1));
        let u = st.universal.unwrap();
        assert_eq!(u.spec().scales, vec![1]);
        assert_eq!(u.spec().multipliers, vec![1.0]);
    }

    #[test]
    fn wrong_method_is_rejected() {
        let d = batch(16, 6);
        let c = cfg(Method::Baseline, 1);
        let mut st = setup(&c);
        let mut u = PyramidPerturbation::init_zeros(small_spec(0.01), shape()).unwrap();
        let err = train_step_upat(&mut st.model, &d.images, &d.labels, &mut u, &mut st.optimizer, &c, 1, &mut CostLedger::new());
        assert!(matches!(err, Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(Method::Upat, 1);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(Method::Upat, 1);
        c.optimizer.warmup_epochs = 3;
        assert!(c.validate().is_err());
        assert_eq!("upat_no_clean".parse::<Method>().unwrap(), Method::UpatNoClean);
        assert!("pgd".parse::<Method>().is_err());
    }

    #[test]
    fn smoke_run_is_reproducible() {
        let data = synthetic_blobs(&SyntheticSpec::new(512, 10, ImageShape::new(32, 32, 3), 0)).unwrap();
        let splits = split(&data, 0.1, 0).unwrap();
        let arch = ArchConfig::Mlp(MlpConfig {
            image: ImageShape::new(32, 32, 3),
            hidden: 16,
            num_classes: 10,
            masked_inputs: vec![],
        });
        let mut c = cfg(Method::Upat, 1);
        c.batch_size = 64;
        c.attack.spec = PyramidSpec::standard(8.0 / 255.0, 8.0 / 255.0);
        c.augment = AugmentConfig::default();
        let run = || {
            let mut st = init_state(&c, &arch, splits.train.len()).unwrap();
            let mut seen = 0;
            run_training(&c, &splits, &mut st, |_, _| {
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, 2);
            st
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history[1].cumulative_units, 2.0 * 2.0 * 7.0);
        assert!(a.history.iter().all(|r| r.val_clean_acc.is_some() && r.adv_err_increase.is_some()));
    }
}
