//! Experiment configuration: a TOML file plus dotted-path overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use upat_core::adversary::{AttackConfig, RadiusSchedule, StepSizeRule};
use upat_core::data::AugmentConfig;
use upat_core::models::{ArchConfig, MlpConfig, VitConfig};
use upat_core::optim::OptimizerConfig;
use upat_core::pyramid::{ImageShape, PyramidSpec};
use upat_core::training::{Method, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// An l-infinity radius in 8-bit intensity levels, written `"N/255"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Radius {
    levels: f64,
}

impl Radius {
    pub fn from_levels(levels: f64) -> Self {
        Self { levels }
    }

    pub fn levels(self) -> f64 {
        self.levels
    }

    /// Value in `[0, 1]` pixel units.
    pub fn value(self) -> f64 {
        self.levels / 255.0
    }
}

impl fmt::Display for Radius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/255", self.levels)
    }
}

impl FromStr for Radius {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let levels = match s.split_once('/') {
            Some((n, d)) if d.trim() == "255" => n.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"))?,
            Some(_) => return Err(format!("{s:?}: radius denominator must be 255")),
            None => s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))? * 255.0,
        };
        if !(levels.is_finite() && levels >= 0.0) {
            return Err(format!("{s:?}: radius must be finite and >= 0"));
        }
        Ok(Self { levels })
    }
}

impl Serialize for Radius {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Radius {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
            Raw::Number(v) => v.to_string().parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Procedural Gaussian-blob classes; needs no files.
    Synthetic,
    /// CIFAR-10 binary batches under `root`.
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// `synthetic` (default) or `cifar10`.
    pub kind: DatasetKind,
    /// Directory holding `data_batch_{1..5}.bin` (cifar10 only).
    pub root: Option<PathBuf>,
    /// Synthetic sample count (default 5600).
    pub n: usize,
    /// Synthetic class count (default 10).
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Generation and split seed (default 0).
    pub seed: u64,
    /// Share held out for validation, rounded down (default 0.1).
    pub val_fraction: f64,
    /// Optional cap on the number of loaded examples.
    pub limit: Option<usize>,
    /// Expected SHA-256 per file name (cifar10 only).
    pub checksums: BTreeMap<String, String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            root: None,
            n: 5600,
            classes: 10,
            height: 32,
            width: 32,
            channels: 3,
            seed: 0,
            val_fraction: 0.1,
            limit: None,
            checksums: BTreeMap::new(),
        }
    }
}

impl DatasetConfig {
    pub fn image(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TinyVit,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `tiny_vit` (default) or `mlp`.
    pub kind: ModelKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the `mlp` model.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::TinyVit,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 2,
            hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub scales: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub per_channel: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scales: vec![32, 16, 1],
            multipliers: vec![20.0, 10.0, 1.0],
            per_channel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// baseline | pat | upat | upat_flat | upat_no_clean (default upat).
    pub method: Method,
    /// Weight of the adversarial loss term (default 1.0).
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model initialisation, shuffling and augmentation seed.
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Perturbation radius (default "8/255").
    pub radius: Radius,
    /// Linear radius decay on or off (default on).
    pub schedule: bool,
    /// First epoch of the decay (default 3).
    pub schedule_start_epoch: usize,
    /// Final radius as a fraction of the initial one (default 0.1).
    pub schedule_end_fraction: f64,
    /// Sample-wise attack steps (default 5).
    pub attack_steps: usize,
    /// Sample-wise step size; radius / steps when absent.
    pub attack_step: Option<Radius>,
    pub random_init: bool,
    /// Ascent step of the universal pattern; radius / 10 when absent.
    pub universal_step: Option<Radius>,
    pub pyramid: PyramidConfig,
    pub flip: bool,
    pub crop_padding: usize,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: Method::Upat,
            lambda: 1.0,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_epochs: 1,
            radius: Radius::from_levels(8.0),
            schedule: true,
            schedule_start_epoch: 3,
            schedule_end_fraction: 0.1,
            attack_steps: 5,
            attack_step: None,
            random_init: false,
            universal_step: None,
            pyramid: PyramidConfig::default(),
            flip: true,
            crop_padding: 4,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Rows per forward pass.
    pub chunk: usize,
    /// Examples per split for attack strength (default 512).
    pub strength_samples: usize,
    pub strength_steps: usize,
    pub landscape_grid: usize,
    pub landscape_span: f64,
    pub landscape_samples: usize,
    pub landscape_seed: u64,
    pub corruptions: Vec<String>,
    pub max_severity: usize,
    pub corruption_seed: u64,
    /// Pixel upscale factor of exported pyramid images.
    pub viz_upscale: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chunk: 256,
            strength_samples: 512,
            strength_steps: 5,
            landscape_grid: 21,
            landscape_span: 1.0,
            landscape_samples: 512,
            landscape_seed: 0,
            corruptions: ["gaussian_noise", "blur", "contrast", "pixelate"]
                .map(String::from)
                .to_vec(),
            max_severity: 3,
            corruption_seed: 0,
            viz_upscale: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Step counts of the sample-wise rows.
    pub pat_steps: Vec<usize>,
    /// Radii of the universal sweep.
    pub radii: Vec<Radius>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            pat_steps: vec![1, 2, 3, 4, 5],
            radii: [2.0, 4.0, 6.0, 8.0, 10.0, 12.0].map(Radius::from_levels).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Free-form label copied into summaries.
    pub run_id: String,
    /// Parent of all run directories (default "runs").
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn arch(&self) -> ArchConfig {
        let image = self.dataset.image();
        let m = &self.model;
        match m.kind {
            ModelKind::TinyVit => ArchConfig::TinyVit(VitConfig {
                image,
                patch_size: m.patch_size,
                embed_dim: m.embed_dim,
                depth: m.depth,
                num_heads: m.num_heads,
                mlp_ratio: m.mlp_ratio,
                num_classes: self.num_classes(),
            }),
            ModelKind::Mlp => ArchConfig::Mlp(MlpConfig {
                image,
                hidden: m.hidden,
                num_classes: self.num_classes(),
                masked_inputs: vec![],
            }),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Synthetic => self.dataset.classes,
            DatasetKind::Cifar10 => 10,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let r = t.radius.value();
        let spec = PyramidSpec {
            scales: t.pyramid.scales.clone(),
            multipliers: t.pyramid.multipliers.clone(),
            radius: r,
            step_size: t.attack_step.map(Radius::value).unwrap_or(r / t.attack_steps.max(1) as f64),
            per_channel: t.pyramid.per_channel,
        };
        let schedule = if t.schedule {
            RadiusSchedule {
                r_start: r,
                r_end: r * t.schedule_end_fraction,
                e_start: t.schedule_start_epoch,
                e_end: t.epochs.max(t.schedule_start_epoch + 1),
                enabled: true,
            }
        } else {
            RadiusSchedule::constant(r)
        };
        TrainConfig {
            method: t.method,
            lambda: t.lambda,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: OptimizerConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                warmup_epochs: t.warmup_epochs,
                ..Default::default()
            },
            attack: AttackConfig {
                num_steps: t.attack_steps,
                spec,
                random_init: t.random_init,
                step_size_rule: match t.attack_step {
                    Some(s) => StepSizeRule::Explicit(s.value()),
                    None => StepSizeRule::RadiusOverSteps,
                },
            },
            schedule,
            seed: t.seed,
            augment: AugmentConfig {
                flip: t.flip,
                crop_padding: t.crop_padding,
            },
            universal_step: t.universal_step.map(Radius::value),
            eval_chunk: self.eval.chunk,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.val_fraction) {
            return bad(format!("dataset.val_fraction {} outside [0, 1)", d.val_fraction));
        }
        if d.kind == DatasetKind::Cifar10 {
            if d.root.is_none() {
                return bad("dataset.root is required for cifar10".into());
            }
            if d.image() != ImageShape::new(32, 32, 3) {
                return bad("cifar10 images are 32x32x3".into());
            }
        }
        // TOML integers are signed, so larger seeds could not be read back
        let seeds = [self.dataset.seed, self.train.seed, self.eval.landscape_seed, self.eval.corruption_seed];
        if seeds.iter().chain(&self.ablate.seeds).any(|&s| s > i64::MAX as u64) {
            return bad(format!("seeds must be at most {}", i64::MAX));
        }
        if !(0.0..=1.0).contains(&self.train.schedule_end_fraction) {
            return bad("train.schedule_end_fraction must be in [0, 1]".into());
        }
        if self.train.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be >= 1".into());
        }
        if self.eval.landscape_grid.is_multiple_of(2) {
            return bad(format!("eval.landscape_grid must be odd, got {}", self.eval.landscape_grid));
        }
        for c in &self.eval.corruptions {
            upat_core::evaluation::Corruption::parse(c).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.eval.max_severity > upat_core::evaluation::MAX_SEVERITY {
            return bad("eval.max_severity must be <= 3".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        upat_core::models::Model::new(&self.arch(), &mut rng).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Hex SHA-256 of everything that affects results (not `output_dir` or `run_id`).
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.run_id = String::new();
        c.ablate = AblateConfig::default();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config always serializes")))
    }

    /// `<output_dir>/<method>-<hash prefix>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!(
            "{}-{}-s{}",
            self.train.method,
            &self.content_hash()[..12],
            self.train.seed
        ))
    }
}

/// Parses `key.path=value` into its parts.
pub fn parse_override(raw: &str) -> Result<(String, String), ConfigError> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Override(raw.to_string())),
    }
}

/// A TOML literal when `raw` parses as one, otherwise a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(format!("{key}={raw}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), override_value(raw));
    Ok(())
}

/// Parses TOML text, applies overrides, and rejects every unknown key at once.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(toml::Value::Table(table), |path| {
        unknown.push(path.to_string())
    })
    .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(ConfigError::UnknownKeys(unknown));
    }
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
            path: p.to_path_buf(),
            source,
        })?,
        None => String::new(),
    };
    let cfg = parse_config(&text, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_strings() {
        assert_eq!("8/255".parse::<Radius>().unwrap().value(), 8.0 / 255.0);
        assert_eq!(" 0.5 / 255".parse::<Radius>().unwrap().levels(), 0.5);
        assert_eq!("0.2".parse::<Radius>().unwrap().levels(), 0.2 * 255.0);
        assert!("8/256".parse::<Radius>().is_err());
        assert!("-1/255".parse::<Radius>().is_err());
        assert_eq!(Radius::from_levels(6.0).to_string(), "6/255");
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(parse_config(&c.to_toml(), &[]).unwrap(), c);
        assert_eq!(parse_config("", &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply_with_types() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c = parse_config(
            "[train]\nepochs = 4\n",
            &[o("train.method", "pat"), o("train.radius", "6/255"), o("train.lambda", "0.5"), o("train.schedule", "false")],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.method, Method::Pat);
        assert_eq!(c.train.radius.levels(), 6.0);
        assert_eq!(c.train.lambda, 0.5);
        assert!(!c.train.schedule);
        assert!(!c.train_config().schedule.enabled);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = parse_config("bogus = 1\n[train]\nlamda = 2\n[model]\ndepht = 3\n", &[]).unwrap_err();
        match err {
            ConfigError::UnknownKeys(keys) => {
                assert_eq!(keys.len(), 3, "{keys:?}");
                assert!(keys.iter().any(|k| k.contains("lamda")));
                assert!(keys.iter().any(|k| k.contains("depht")));
            }
            other => panic!("{other}"),
        }
        let (k, _) = parse_override("train.foo=1").unwrap();
        assert!(matches!(
            parse_config("", &[(k, "1".into())]),
            Err(ConfigError::UnknownKeys(_))
        ));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn run_dir_is_content_addressed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run_id = "other".into();
        assert_eq!(a.run_dir(), b.run_dir());
        b.train.lambda = 0.5;
        assert_ne!(a.run_dir(), b.run_dir());
        let mut c = a.clone();
        c.train.seed = 3;
        assert!(c.run_dir().to_string_lossy().ends_with("-s3"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.eval.landscape_grid = 20;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.warmup_epochs = 40;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.dataset.kind = DatasetKind::Cifar10;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.ablate.seeds = vec![u64::MAX];
        assert!(c.validate().is_err());
    }
}
