//! Single-file checkpoints.
//!
//! Layout: `UPATCKPT`, format version (`u32` LE), header length (`u64` LE), a
//! JSON header, then every array as raw little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostLedger;
use crate::models::{ArchConfig, Classifier, Model, ModelError, ParamKind, ParamStore};
use crate::optim::{AdamW, OptimizerConfig};
use crate::pyramid::{ImageShape, PyramidError, PyramidPerturbation, PyramidSpec};
use crate::tensor::Tensor;
use crate::training::{EpochRecord, Method, TrainerState};

pub const MAGIC: &[u8; 8] = b"UPATCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// `u128` word position, as decimal text.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimState {
    config: OptimizerConfig,
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UniversalHeader {
    spec: PyramidSpec,
    target: ImageShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    method: Method,
    arch: ArchConfig,
    epoch: usize,
    param_kinds: Vec<ParamKind>,
    optimizer: OptimState,
    universal: Option<UniversalHeader>,
    rng: RngState,
    ledger: CostLedger,
    history: Vec<EpochRecord>,
    arrays: Vec<ArrayEntry>,
}

fn decode_seed(s: &str) -> Result<[u8; 32], CheckpointError> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|_| CheckpointError::Corrupt(format!("bad rng seed {s:?}")))?;
    Ok(out)
}

/// Serializes a trainer state to bytes.
pub fn encode(method: Method, state: &TrainerState) -> Result<Vec<u8>, CheckpointError> {
    let mut arrays: Vec<(String, &Tensor)> = Vec::new();
    let params = state.model.params();
    for p in params.iter() {
        arrays.push((format!("param/{}", p.name), &p.value));
    }
    let (m, v) = state.optimizer.moments();
    for (p, t) in params.iter().zip(m) {
        arrays.push((format!("optim/m/{}", p.name), t));
    }
    for (p, t) in params.iter().zip(v) {
        arrays.push((format!("optim/v/{}", p.name), t));
    }
    let universal = state.universal.as_ref().map(|u| {
        for (level, s) in u.levels().iter().zip(&u.spec().scales) {
            arrays.push((format!("delta_scale_{s}"), level));
        }
        UniversalHeader {
            spec: u.spec().clone(),
            target: u.target(),
        }
    });
    let opt = &state.optimizer;
    let header = Header {
        method,
        arch: state.model.arch(),
        epoch: state.epochs_done,
        param_kinds: params.iter().map(|p| p.kind).collect(),
        optimizer: OptimState {
            config: opt.config().clone(),
            step: opt.step_count(),
            warmup_steps: opt.warmup_steps(),
            total_steps: opt.total_steps(),
        },
        universal,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        ledger: state.ledger.clone(),
        history: state.history.clone(),
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let body: usize = arrays.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub method: Method,
    pub state: TrainerState,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("header length past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;

    let mut cursor = body_start;
    let mut take = |entry: &ArrayEntry| -> Result<Tensor, CheckpointError> {
        let n: usize = entry.shape.iter().product();
        let end = cursor + n * 8;
        if end > bytes.len() {
            return Err(CheckpointError::Corrupt(format!("array {} truncated", entry.name)));
        }
        let data = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        Ok(Tensor::from_vec(&entry.shape, data))
    };
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        arrays.push((e.name.as_str(), take(e)?));
    }
    if cursor != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after arrays".into()));
    }

    let n = header.param_kinds.len();
    let expect = |i: usize, prefix: &str| -> Result<&str, CheckpointError> {
        arrays
            .get(i)
            .and_then(|(name, _)| name.strip_prefix(prefix))
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing array #{i} ({prefix}*)")))
    };
    let mut params = ParamStore::default();
    for (i, kind) in header.param_kinds.iter().enumerate() {
        let name = expect(i, "param/")?;
        params.push(name, *kind, arrays[i].1.clone());
    }
    for i in 0..n {
        expect(n + i, "optim/m/")?;
        expect(2 * n + i, "optim/v/")?;
    }
    let first: Vec<Tensor> = arrays[n..2 * n].iter().map(|(_, t)| t.clone()).collect();
    let second: Vec<Tensor> = arrays[2 * n..3 * n].iter().map(|(_, t)| t.clone()).collect();
    let model = Model::from_params(&header.arch, params)?;
    let o = &header.optimizer;
    let optimizer = AdamW::from_state(o.config.clone(), first, second, o.step, o.warmup_steps, o.total_steps);

    let rest = &arrays[3 * n..];
    let universal = match &header.universal {
        Some(u) => {
            if rest.len() != u.spec.scales.len() {
                return Err(CheckpointError::Corrupt("universal level count".into()));
            }
            let levels = rest.iter().map(|(_, t)| t.clone()).collect();
            Some(PyramidPerturbation::from_levels(u.spec.clone(), u.target, levels)?)
        }
        None if rest.is_empty() => None,
        None => return Err(CheckpointError::Corrupt("unexpected arrays".into())),
    };

    let mut rng = ChaCha8Rng::from_seed(decode_seed(&header.rng.seed)?);
    rng.set_stream(header.rng.stream);
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| CheckpointError::Corrupt("bad rng word position".into()))?;
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        method: header.method,
        state: TrainerState {
            model,
            optimizer,
            universal,
            rng,
            epochs_done: header.epoch,
            ledger: header.ledger,
            history: header.history,
        },
    })
}

/// Writes atomically (temp file, then rename).
pub fn save(path: &Path, method: Method, state: &TrainerState) -> Result<(), CheckpointError> {
    let bytes = encode(method, state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{AttackConfig, RadiusSchedule, StepSizeRule};
    use crate::data::{split, synthetic_blobs, AugmentConfig, SyntheticSpec};
    use crate::models::MlpConfig;
    use crate::training::{init_state, run_training, TrainConfig};
    use rand::RngCore;

    fn cfg() -> TrainConfig {
        let r = 8.0 / 255.0;
        TrainConfig {
            method: Method::Upat,
            lambda: 1.0,
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerConfig {
                warmup_epochs: 1,
                ..Default::default()
            },
            attack: AttackConfig {
                num_steps: 1,
                spec: PyramidSpec {
                    scales: vec![4, 1],
                    multipliers: vec![4.0, 1.0],
                    radius: r,
                    step_size: r,
                    per_channel: true,
                },
                random_init: false,
                step_size_rule: StepSizeRule::RadiusOverSteps,
            },
            schedule: RadiusSchedule::decay_to_tenth(r, 1, 3),
            seed: 11,
            augment: AugmentConfig::default(),
            universal_step: None,
            eval_chunk: 64,
        }
    }

    fn arch() -> ArchConfig {
        ArchConfig::Mlp(MlpConfig {
            image: ImageShape::new(8, 8, 3),
            hidden: 8,
            num_classes: 4,
            masked_inputs: vec![],
        })
    }

    fn splits() -> crate::data::Splits {
        let d = synthetic_blobs(&SyntheticSpec::new(160, 4, ImageShape::new(8, 8, 3), 2)).unwrap();
        split(&d, 0.2, 0).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = cfg();
        let s = splits();
        let mut st = init_state(&c, &arch(), s.train.len()).unwrap();
        run_training(&c, &s, &mut st, |_, _| Ok(())).unwrap();
        let a = encode(Method::Upat, &st).unwrap();
        let back = decode(&a).unwrap();
        let b = encode(back.method, &back.state).unwrap();
        assert_eq!(a, b);
        let mut r1 = st.rng.clone();
        let mut r2 = back.state.rng.clone();
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn version_and_magic_are_checked() {
        let c = cfg();
        let st = init_state(&c, &arch(), 128).unwrap();
        let mut bytes = encode(Method::Upat, &st).unwrap();
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = cfg();
        let s = splits();
        let mut full = init_state(&c, &arch(), s.train.len()).unwrap();
        run_training(&c, &s, &mut full, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut part = init_state(&c, &arch(), s.train.len()).unwrap();
        let result = run_training(&c, &s, &mut part, |st, rec| {
            save(&path, Method::Upat, st).unwrap();
            if rec.epoch == 1 {
                Err(crate::training::TrainError::Callback("interrupt".into()))
            } else {
                Ok(())
            }
        });
        assert!(result.is_err());
        let mut resumed = load(&path).unwrap().state;
        assert_eq!(resumed.epochs_done, 1);
        run_training(&c, &s, &mut resumed, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.model.params(), full.model.params());
        assert_eq!(resumed.universal, full.universal);
    }
}
