//! Subcommand implementations, usable as a library.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use upat_core::adversary::{AttackConfig, StepSizeRule};
use upat_core::checkpoint::{self, CheckpointError};
use upat_core::cost::{CostLedger, PassCostReport};
use upat_core::data::{load_cifar10, split, synthetic_blobs, DataError, Dataset, Splits, SyntheticSpec};
use upat_core::evaluation::{
    accuracy, attack_strength, corruption_eval, export_pyramid_images, loss_landscape, AdversaryMode,
    EvalError,
};
use upat_core::models::{Classifier, Model};
use upat_core::optim::{AdamW, OptimizerConfig};
use upat_core::pyramid::PyramidPerturbation;
use upat_core::training::{
    init_state, run_training, train_step_baseline, train_step_pat, train_step_upat, EpochRecord,
    Method, TrainError, TrainerState,
};

use crate::config::{ConfigError, DatasetKind, ExperimentConfig, Radius};

/// Failure of a subcommand, with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if let TrainError::InvalidConfig(m) = e {
            CliError::Usage(m)
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownCorruption(_) | EvalError::Severity(_) | EvalError::Grid(_) => {
                CliError::Usage(e.to_string())
            }
            EvalError::Model(upat_core::models::ModelError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::BadMagic | CheckpointError::Version { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

/// Loads and splits the configured dataset. Never touches the output tree.
pub fn ingest(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let d = &cfg.dataset;
    let data = match d.kind {
        DatasetKind::Synthetic => {
            let mut data = synthetic_blobs(&SyntheticSpec::new(d.n, d.classes, d.image(), d.seed))?;
            if let Some(l) = d.limit {
                data = data.head(l);
            }
            data
        }
        DatasetKind::Cifar10 => {
            let root = d.root.as_ref().ok_or_else(|| CliError::Usage("dataset.root is required for cifar10".into()))?;
            if !root.is_dir() {
                return Err(CliError::Usage(format!(
                    "dataset root {} does not exist; point dataset.root at the extracted \
                     cifar-10-batches-bin directory or use dataset.kind = \"synthetic\"",
                    root.display()
                )));
            }
            load_cifar10(root, &d.checksums, d.limit)?
        }
    };
    Ok(split(&data, d.val_fraction, d.seed)?)
}

/// Summary of a dataset, as written by `ingest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: usize,
    pub val: usize,
    pub classes: usize,
    pub image: [usize; 3],
    pub train_class_counts: Vec<usize>,
    /// SHA-256 of the train and validation pixels and labels, in order.
    pub content_sha256: String,
}

pub fn manifest(cfg: &ExperimentConfig, splits: &Splits) -> DatasetManifest {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for d in [&splits.train, &splits.val] {
        for v in d.images.data() {
            h.update(v.to_le_bytes());
        }
        for l in &d.labels {
            h.update((*l as u64).to_le_bytes());
        }
    }
    let classes = cfg.num_classes();
    let mut counts = vec![0; classes];
    for &l in &splits.train.labels {
        counts[l] += 1;
    }
    DatasetManifest {
        train: splits.train.len(),
        val: splits.val.len(),
        classes,
        image: splits.train.image_shape().dims(),
        train_class_counts: counts,
        content_sha256: hex::encode(h.finalize()),
    }
}

/// Final state of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub final_val_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub cost: PassCostReport,
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Trains (or resumes) the configured run inside its content-addressed directory.
pub fn train(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let splits = ingest(cfg)?;
    train_on(cfg, &splits, log)
}

/// As [`train`], with an already-ingested dataset.
pub fn train_on(cfg: &ExperimentConfig, splits: &Splits, log: &mut dyn Write) -> Result<RunSummary, CliError> {
    let tc = cfg.train_config();
    let dir = cfg.run_dir();
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let last = ckpt_dir.join(LAST_CHECKPOINT);
    let mut state = if last.exists() {
        let ck = checkpoint::load(&last)?;
        if ck.method != tc.method {
            return Err(CliError::Usage(format!(
                "{} holds a {} run, config asks for {}",
                last.display(),
                ck.method,
                tc.method
            )));
        }
        writeln!(log, "resuming {} from epoch {}", dir.display(), ck.state.epochs_done)?;
        ck.state
    } else {
        init_state(&tc, &cfg.arch(), splits.train.len())?
    };
    // rewrite the stream from the restored history so resumes never duplicate lines
    let metrics_path = dir.join("metrics.jsonl");
    {
        let mut f = File::create(&metrics_path)?;
        for r in &state.history {
            writeln!(f, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
    }
    let every = cfg.train.checkpoint_every;
    let epochs = tc.epochs;
    run_training(&tc, splits, &mut state, |st, rec| {
        let io = |e: std::io::Error| TrainError::Callback(e.to_string());
        let mut f = OpenOptions::new().append(true).open(&metrics_path).map_err(io)?;
        writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes")).map_err(io)?;
        if rec.epoch % every == 0 || rec.epoch == epochs {
            let ck = |e: CheckpointError| TrainError::Callback(e.to_string());
            checkpoint::save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", rec.epoch)), tc.method, st).map_err(ck)?;
            checkpoint::save(&last, tc.method, st).map_err(ck)?;
        }
        let _ = writeln!(log, "{}", progress_line(rec));
        Ok(())
    })?;
    let summary = summarize(cfg, &dir, &state);
    fs::write(dir.join("summary.json"), json(&summary))?;
    Ok(summary)
}

fn progress_line(r: &EpochRecord) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "-".into());
    format!(
        "epoch {:>3} {:<13} loss {:.4} train {} val {} radius {:.2}/255 units {}",
        r.epoch,
        r.method.name(),
        r.train_loss,
        pct(r.train_clean_acc),
        pct(r.val_clean_acc),
        r.radius * 255.0,
        r.cumulative_units
    )
}

fn summarize(cfg: &ExperimentConfig, dir: &Path, state: &TrainerState) -> RunSummary {
    let last = state.history.last();
    RunSummary {
        run_id: cfg.run_id.clone(),
        run_dir: dir.to_path_buf(),
        config_hash: cfg.content_hash(),
        method: cfg.train.method,
        seed: cfg.train.seed,
        epochs: state.epochs_done,
        final_val_acc: last.and_then(|r| r.val_clean_acc),
        final_train_acc: last.and_then(|r| r.train_clean_acc),
        cost: state.cost_report(cfg.train.method),
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub method: Method,
    pub attack_steps: usize,
    pub radius: String,
    pub seed: u64,
    pub val_clean_acc: Option<f64>,
    pub train_clean_acc: Option<f64>,
    pub adv_err_increase: Option<f64>,
    pub units_per_step: f64,
    pub run_dir: PathBuf,
}

/// Variants compared by `ablate`: every method, sample-wise step counts, and
/// the universal radius sweep.
pub fn ablation_plan(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut plan = Vec::new();
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    for &seed in &cfg.ablate.seeds {
        plan.push(("baseline".to_string(), with(&|c| {
            c.train.method = Method::Baseline;
            c.train.seed = seed;
        })));
        for &k in &cfg.ablate.pat_steps {
            plan.push((format!("pat k={k}"), with(&|c| {
                c.train.method = Method::Pat;
                c.train.attack_steps = k;
                c.train.seed = seed;
            })));
        }
        for m in [Method::Upat, Method::UpatFlat, Method::UpatNoClean] {
            plan.push((m.name().to_string(), with(&|c| {
                c.train.method = m;
                c.train.seed = seed;
            })));
        }
        for &r in &cfg.ablate.radii {
            if r == cfg.train.radius {
                continue;
            }
            plan.push((format!("upat r={r}"), with(&|c| {
                c.train.method = Method::Upat;
                c.train.radius = r;
                c.train.seed = seed;
            })));
        }
    }
    plan
}

pub const ABLATION_COLUMNS: [&str; 10] = [
    "label",
    "method",
    "attack_steps",
    "radius",
    "seed",
    "val_clean_acc",
    "train_clean_acc",
    "adv_err_increase",
    "units_per_step",
    "run_dir",
];

/// Runs every ablation variant (finished runs are reused, interrupted ones
/// resume) and writes `ablation.csv` plus `ablation.md` under `output_dir`.
pub fn ablate(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Vec<AblationRow>, CliError> {
    cfg.validate()?;
    let splits = ingest(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for (label, c) in ablation_plan(cfg) {
        writeln!(log, "== {label} (seed {})", c.train.seed)?;
        let summary = train_on(&c, &splits, log)?;
        let history = read_metrics(&summary.run_dir.join("metrics.jsonl"))?;
        let last = history.last();
        rows.push(AblationRow {
            label,
            method: c.train.method,
            attack_steps: c.train.attack_steps,
            radius: c.train.radius.to_string(),
            seed: c.train.seed,
            val_clean_acc: summary.final_val_acc,
            train_clean_acc: summary.final_train_acc,
            adv_err_increase: last.and_then(|r| r.adv_err_increase),
            units_per_step: summary.cost.total_units_per_step,
            run_dir: summary.run_dir,
        });
        write_ablation(&cfg.output_dir, &rows)?;
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record(ABLATION_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.method.name().to_string(),
            r.attack_steps.to_string(),
            r.radius.clone(),
            r.seed.to_string(),
            opt(r.val_clean_acc),
            opt(r.train_clean_acc),
            opt(r.adv_err_increase),
            r.units_per_step.to_string(),
            r.run_dir.display().to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("ablation.md"), render_table(rows))?;
    Ok(())
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
    let mut s = String::from("| run | seed | val acc (%) | train acc (%) | adv err + (pts) | units/step |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.label,
            r.seed,
            pct(r.val_clean_acc),
            pct(r.train_clean_acc),
            pct(r.adv_err_increase),
            r.units_per_step
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeMode {
    Strength,
    Landscape,
    Viz,
    Corruption,
    Cost,
}

impl std::str::FromStr for AnalyzeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "strength" => AnalyzeMode::Strength,
            "landscape" => AnalyzeMode::Landscape,
            "viz" => AnalyzeMode::Viz,
            "corruption" => AnalyzeMode::Corruption,
            "cost" => AnalyzeMode::Cost,
            _ => return Err(format!("unknown analysis mode {s:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversaryChoice {
    Universal,
    SampleWise,
    Both,
}

impl std::str::FromStr for AdversaryChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "universal" => AdversaryChoice::Universal,
            "samplewise" => AdversaryChoice::SampleWise,
            "both" => AdversaryChoice::Both,
            _ => return Err(format!("unknown adversary {s:?}")),
        })
    }
}

/// Finds `config.toml` next to a checkpoint, walking up the run directory.
pub fn config_for_checkpoint(ckpt: &Path) -> Option<PathBuf> {
    ckpt.ancestors()
        .skip(1)
        .take(3)
        .map(|d| d.join("config.toml"))
        .find(|p| p.is_file())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthReport {
    pub universal_train: Option<f64>,
    pub universal_val: Option<f64>,
    pub samplewise_train: Option<f64>,
    pub samplewise_val: Option<f64>,
    pub radius: f64,
    pub samplewise_steps: usize,
}

/// Universal and/or sample-wise error increase on train and val subsets.
pub fn strength(
    cfg: &ExperimentConfig,
    model: &Model,
    universal: Option<&PyramidPerturbation>,
    splits: &Splits,
    choice: AdversaryChoice,
) -> Result<StrengthReport, CliError> {
    let radius = cfg.train.radius.value();
    let n = cfg.eval.strength_samples;
    let (train, val) = (splits.train.head(n), splits.val.head(n));
    let want_uni = matches!(choice, AdversaryChoice::Universal | AdversaryChoice::Both);
    let want_sw = matches!(choice, AdversaryChoice::SampleWise | AdversaryChoice::Both);
    if choice == AdversaryChoice::Universal && universal.is_none() {
        return Err(CliError::Usage(
            "checkpoint has no universal perturbation; use --adversary samplewise".into(),
        ));
    }
    let chunk = cfg.eval.chunk;
    let mut report = StrengthReport {
        universal_train: None,
        universal_val: None,
        samplewise_train: None,
        samplewise_val: None,
        radius,
        samplewise_steps: cfg.eval.strength_steps,
    };
    let measure = |d: &Dataset, mode: &AdversaryMode<'_>| -> Result<Option<f64>, CliError> {
        if d.is_empty() {
            Ok(None)
        } else {
            Ok(Some(attack_strength(model, d, mode, chunk)?))
        }
    };
    if let (true, Some(u)) = (want_uni, universal) {
        let mode = AdversaryMode::Universal { state: u, radius };
        report.universal_train = measure(&train, &mode)?;
        report.universal_val = measure(&val, &mode)?;
    }
    if want_sw {
        let attack = AttackConfig {
            num_steps: cfg.eval.strength_steps,
            spec: cfg.train_config().attack.spec,
            random_init: false,
            step_size_rule: StepSizeRule::RadiusOverSteps,
        };
        let mode = AdversaryMode::SampleWise {
            attack,
            radius,
            seed: cfg.train.seed,
        };
        report.samplewise_train = measure(&train, &mode)?;
        report.samplewise_val = measure(&val, &mode)?;
    }
    Ok(report)
}

/// Per-step pass cost of every method, measured by running one real step of
/// each on a small batch with a copy of `model`.
pub fn cost_table(model: &Model, pat_steps: &[usize], radius: f64) -> Result<Vec<PassCostReport>, CliError> {
    let shape = model.image_shape();
    let data = synthetic_blobs(&SyntheticSpec::new(4, model.num_classes().max(2), shape, 0))?;
    let labels: Vec<usize> = data.labels.iter().map(|l| l % model.num_classes()).collect();
    let base = ExperimentConfig::default();
    let mut out = Vec::new();
    let fresh = |m: &Model| AdamW::new(OptimizerConfig::default(), m.params(), 1, 1);
    let mut m = model.clone();
    let mut ledger = CostLedger::new();
    train_step_baseline(&mut m, &data.images, &labels, &mut fresh(model), &mut ledger)?;
    out.push(ledger.report("baseline"));
    for &k in pat_steps {
        let mut c = base.clone();
        c.train.method = Method::Pat;
        c.train.attack_steps = k;
        c.train.radius = Radius::from_levels(radius * 255.0);
        c.train.pyramid.scales = vec![1];
        c.train.pyramid.multipliers = vec![1.0];
        let tc = c.train_config();
        let mut m = model.clone();
        let mut ledger = CostLedger::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step_pat(&mut m, &data.images, &labels, &mut fresh(model), &tc, radius, &mut rng, &mut ledger)?;
        out.push(ledger.report(&format!("pat k={k}")));
    }
    for method in [Method::Upat, Method::UpatFlat, Method::UpatNoClean] {
        let mut c = base.clone();
        c.train.method = method;
        c.train.pyramid.scales = vec![1];
        c.train.pyramid.multipliers = vec![1.0];
        let tc = c.train_config();
        let mut state = PyramidPerturbation::init_zeros(tc.effective_spec(), shape)?;
        let mut m = model.clone();
        let mut ledger = CostLedger::new();
        train_step_upat(&mut m, &data.images, &labels, &mut state, &mut fresh(model), &tc, 1, &mut ledger)?;
        out.push(ledger.report(method.name()));
    }
    Ok(out)
}

impl From<upat_core::pyramid::PyramidError> for CliError {
    fn from(e: upat_core::pyramid::PyramidError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn render_cost_table(rows: &[PassCostReport]) -> String {
    let mut s = format!(
        "{:<16} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
        "method", "gen/step", "train fwd", "train bwd", "units", "relative"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>8}x\n",
            r.method,
            r.gen_passes_per_step,
            r.train_forward_units,
            r.train_backward_units,
            r.total_units_per_step,
            r.relative_cost
        ));
    }
    s
}

/// Options for `analyze`.
#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    pub mode: AnalyzeMode,
    pub adversary: AdversaryChoice,
    pub grid: Option<usize>,
    pub span: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Runs one analysis on a checkpoint and returns the written files.
pub fn analyze(
    ckpt_path: &Path,
    cfg: &ExperimentConfig,
    opts: &AnalyzeOptions,
    log: &mut dyn Write,
) -> Result<Vec<PathBuf>, CliError> {
    let ck = checkpoint::load(ckpt_path)?;
    let model = ck.state.model;
    let universal = ck.state.universal;
    let radius = cfg.train.radius.value();
    let base = opts.out_dir.clone().unwrap_or_else(|| {
        ckpt_path
            .parent()
            .and_then(|p| if p.ends_with(CHECKPOINT_DIR) { p.parent() } else { Some(p) })
            .unwrap_or(Path::new("."))
            .join("analysis")
    });
    let mut written = Vec::new();
    match opts.mode {
        AnalyzeMode::Cost => {
            let rows = cost_table(&model, &[1, 2, 3, 4, 5], radius)?;
            write!(log, "{}", render_cost_table(&rows))?;
            fs::create_dir_all(&base)?;
            let path = base.join("cost.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["method", "gen_passes_per_step", "train_forward_units", "train_backward_units", "total_units_per_step", "relative_cost"])?;
            for r in &rows {
                w.write_record([
                    r.method.clone(),
                    r.gen_passes_per_step.to_string(),
                    r.train_forward_units.to_string(),
                    r.train_backward_units.to_string(),
                    r.total_units_per_step.to_string(),
                    r.relative_cost.to_string(),
                ])?;
            }
            w.flush()?;
            written.push(path);
        }
        AnalyzeMode::Viz => {
            let dir = base.join("viz");
            match &universal {
                Some(u) => {
                    let r = cfg.train_config().radius_at_epoch(ck.state.epochs_done.max(1));
                    written.extend(export_pyramid_images(u, 0, r, cfg.eval.viz_upscale, &dir)?);
                }
                None => {
                    // no shared pattern: visualise a fresh attack on one validation image
                    let splits = ingest(cfg)?;
                    let one = if splits.val.is_empty() { splits.train.head(1) } else { splits.val.head(1) };
                    let tc = cfg.train_config();
                    let attack = AttackConfig {
                        num_steps: cfg.eval.strength_steps,
                        ..tc.attack
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                    let out = upat_core::adversary::pgd_pyramid_attack(
                        &model,
                        &one.images,
                        &one.labels,
                        &attack,
                        radius,
                        &mut rng,
                        &mut CostLedger::new(),
                    )
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                    written.extend(export_pyramid_images(&out.perturbation, 0, radius, cfg.eval.viz_upscale, &dir)?);
                }
            }
            writeln!(log, "wrote {} images to {}", written.len(), dir.display())?;
        }
        AnalyzeMode::Strength => {
            let splits = ingest(cfg)?;
            let choice = if universal.is_none() && opts.adversary == AdversaryChoice::Both {
                AdversaryChoice::SampleWise
            } else {
                opts.adversary
            };
            let report = strength(cfg, &model, universal.as_ref(), &splits, choice)?;
            fs::create_dir_all(&base)?;
            let path = base.join("strength.json");
            fs::write(&path, json(&report))?;
            writeln!(log, "{}", json(&report))?;
            written.push(path);
        }
        AnalyzeMode::Corruption => {
            let splits = ingest(cfg)?;
            let names: Vec<&str> = cfg.eval.corruptions.iter().map(String::as_str).collect();
            let data = if splits.val.is_empty() { &splits.train } else { &splits.val };
            let report = corruption_eval(&model, data, &names, cfg.eval.max_severity, cfg.eval.corruption_seed, cfg.eval.chunk)?;
            for w in &report.warnings {
                writeln!(log, "warning: {w}")?;
            }
            let clean = accuracy(&model, data, cfg.eval.chunk)?;
            fs::create_dir_all(&base)?;
            let path = base.join("corruption.json");
            fs::write(&path, json(&serde_json::json!({ "clean_acc": clean, "report": report })))?;
            writeln!(log, "{}", json(&report.accs))?;
            written.push(path);
        }
        AnalyzeMode::Landscape => {
            let splits = ingest(cfg)?;
            let sample = splits.train.head(cfg.eval.landscape_samples);
            let grid = opts.grid.unwrap_or(cfg.eval.landscape_grid);
            let span = opts.span.unwrap_or(cfg.eval.landscape_span);
            let g = loss_landscape(&model, &sample.images, &sample.labels, grid, span, cfg.eval.landscape_seed)?;
            if g.losses.iter().any(|l| !l.is_finite()) {
                return Err(CliError::Numeric("loss landscape contains non-finite cells".into()));
            }
            fs::create_dir_all(&base)?;
            let csv_path = base.join("landscape.csv");
            let png_path = base.join("landscape.png");
            g.write_csv(&csv_path)?;
            g.write_heatmap(&png_path, 12)?;
            writeln!(log, "centre loss {:.6}, grid {grid}x{grid}, span {span}", g.center())?;
            written.push(csv_path);
            written.push(png_path);
        }
    }
    Ok(written)
}
