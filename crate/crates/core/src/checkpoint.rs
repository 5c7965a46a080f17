//! Binary model checkpoints and resumable training state.
//!
//! Layout of both file kinds: 8-byte magic, `u32` format version, `u64`
//! header length, JSON header, then little-endian `f32` tensors in parameter
//! visit order.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelSpec};
use crate::nn::{Adam, AdamConfig};
use crate::real::Real;
use crate::training::{EpochMetrics, TrainState};

pub const MODEL_MAGIC: &[u8; 8] = b"IBCMODEL";
pub const STATE_MAGIC: &[u8; 8] = b"IBCSTATE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    /// Hash of the config that produced the weights.
    pub config_hash: String,
    /// Completed training epochs.
    pub epoch: usize,
    pub pruned: Vec<bool>,
    pub params: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    config_hash: String,
    epoch: usize,
    lr_scale: f64,
    adam: AdamConfig,
    adam_step: u64,
    moments: Vec<Vec<usize>>,
    pruned_history: Vec<Vec<bool>>,
    trace: Vec<EpochMetrics>,
}

fn write_frame<H: Serialize>(magic: &[u8; 8], header: &H, payload: impl Iterator<Item = f32>) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_frame<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 20 {
        return Err(corrupt("file is too short"));
    }
    if &bytes[..8] != magic {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len).ok().and_then(|l| l.checked_add(20)).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: H = serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let payload = &bytes[end..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, values))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn params_of<T: Real>(model: &mut Model<T>) -> (Vec<TensorInfo>, Vec<f32>) {
    let mut infos = Vec::new();
    let mut values = Vec::new();
    model.visit_params(&mut |name, p| {
        infos.push(TensorInfo { name: name.to_string(), shape: p.value.shape().to_vec() });
        values.extend(p.value.iter().map(|v| v.as_f64() as f32));
    });
    (infos, values)
}

pub fn encode_model<T: Real>(model: &mut Model<T>, config_hash: &str, epoch: usize) -> Vec<u8> {
    let (params, values) = params_of(model);
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        config_hash: config_hash.to_string(),
        epoch,
        pruned: model.pruned_mask(),
        params,
    };
    write_frame(MODEL_MAGIC, &header, values.into_iter())
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<(Model<T>, CheckpointHeader)> {
    let (header, values): (CheckpointHeader, Vec<f32>) = read_frame(MODEL_MAGIC, bytes)?;
    let mut model = build_model::<T>(&header.spec, 0).map_err(|e| Error::CorruptCheckpoint(format!("model spec: {e}")))?;
    let (expected, _) = params_of(&mut model);
    if expected != header.params {
        return Err(Error::CorruptCheckpoint("parameter list does not match the model spec".into()));
    }
    let total: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(Error::CorruptCheckpoint(format!("expected {total} parameter values, found {}", values.len())));
    }
    let mut offset = 0;
    model.visit_params(&mut |_, p| {
        let n = p.value.len();
        p.value = ArrayD::from_shape_vec(IxDyn(p.value.shape()), values[offset..offset + n].iter().map(|&v| T::of(v as f64)).collect())
            .expect("shape checked");
        offset += n;
    });
    match model.head.bottleneck_mut() {
        Some(layer) if header.pruned.len() == layer.pruned.len() => layer.pruned.clone_from(&header.pruned),
        Some(_) => return Err(Error::CorruptCheckpoint("pruning mask has the wrong length".into())),
        None if header.pruned.iter().any(|&p| p) => {
            return Err(Error::CorruptCheckpoint("pruning mask on a model without an importance layer".into()))
        }
        None => {}
    }
    Ok((model, header))
}

pub fn save_model<T: Real>(path: &Path, model: &mut Model<T>, config_hash: &str, epoch: usize) -> Result<()> {
    write_atomic(path, &encode_model(model, config_hash, epoch))
}

pub fn load_model<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    decode_model(&std::fs::read(path)?)
}

/// Optimizer moments, schedule state and history; pairs with a model
/// checkpoint of the same epoch.
pub fn encode_state<T: Real>(state: &TrainState<T>, config_hash: &str) -> Vec<u8> {
    let header = StateHeader {
        config_hash: config_hash.to_string(),
        epoch: state.epoch,
        lr_scale: state.lr_scale,
        adam: state.optimizer.config,
        adam_step: state.optimizer.step,
        moments: state.optimizer.first.iter().map(|m| m.shape().to_vec()).collect(),
        pruned_history: state.pruned_history.clone(),
        trace: state.trace.clone(),
    };
    let payload = state.optimizer.first.iter().chain(&state.optimizer.second).flat_map(|m| m.iter().map(|v| v.as_f64() as f32));
    write_frame(STATE_MAGIC, &header, payload)
}

pub fn save_train_state<T: Real>(model_path: &Path, state_path: &Path, state: &mut TrainState<T>, config_hash: &str) -> Result<()> {
    save_model(model_path, &mut state.model, config_hash, state.epoch)?;
    write_atomic(state_path, &encode_state(state, config_hash))
}

/// Restores a [`TrainState`]; both files must come from the same epoch and
/// config.
pub fn load_train_state<T: Real>(model_path: &Path, state_path: &Path, config_hash: &str) -> Result<TrainState<T>> {
    let (model, ckpt) = load_model::<T>(model_path)?;
    let (header, values): (StateHeader, Vec<f32>) = read_frame(STATE_MAGIC, &std::fs::read(state_path)?)?;
    if header.config_hash != config_hash || ckpt.config_hash != config_hash {
        return Err(Error::Config(format!(
            "saved state belongs to config {} but the current config hashes to {config_hash}",
            header.config_hash
        )));
    }
    if header.epoch != ckpt.epoch {
        return Err(Error::CorruptCheckpoint(format!("state is from epoch {} but weights from epoch {}", header.epoch, ckpt.epoch)));
    }
    let sizes: Vec<usize> = header.moments.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum::<usize>() * 2;
    if total != values.len() {
        return Err(Error::CorruptCheckpoint(format!("expected {total} moment values, found {}", values.len())));
    }
    let mut rest = values.as_slice();
    let mut take = |shape: &Vec<usize>| {
        let n = shape.iter().product();
        let (head, tail) = rest.split_at(n);
        rest = tail;
        ArrayD::from_shape_vec(IxDyn(shape), head.iter().map(|&v| T::of(v as f64)).collect()).expect("sized")
    };
    let first: Vec<ArrayD<T>> = header.moments.iter().map(&mut take).collect();
    let second: Vec<ArrayD<T>> = header.moments.iter().map(&mut take).collect();
    let optimizer = Adam { config: header.adam, step: header.adam_step, first, second };
    Ok(TrainState {
        epoch: header.epoch,
        model,
        optimizer,
        lr_scale: header.lr_scale,
        pruned_history: header.pruned_history,
        trace: header.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::models::{Task, Variant};

    fn model(variant: Variant) -> Model<f32> {
        let mut c = ExperimentConfig::defaults(Task::Mnist);
        c.variant = variant;
        c.n_initial = 8;
        build_model(&c.model_spec(), 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for variant in [Variant::Vfe, Variant::VlVfe, Variant::DeepJscc] {
            let mut m = model(variant);
            if let Some(l) = m.head.bottleneck_mut() {
                l.pruned[2] = true;
            }
            let first = encode_model(&mut m, "abc", 4);
            let (mut back, header) = decode_model::<f32>(&first).unwrap();
            assert_eq!(header.epoch, 4);
            assert_eq!(back.pruned_mask(), m.pruned_mask());
            assert_eq!(encode_model(&mut back, "abc", 4), first);
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = encode_model(&mut model(Variant::Vfe), "h", 0);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_model::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: FORMAT_VERSION }));
        let text = err.to_string();
        assert!(text.contains('7') && text.contains(&FORMAT_VERSION.to_string()), "{text}");
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let bytes = encode_model(&mut model(Variant::Vfe), "h", 0);
        for broken in [&bytes[..10], &bytes[..bytes.len() - 3], &bytes[..bytes.len() - 4]] {
            assert!(matches!(decode_model::<f32>(broken), Err(Error::CorruptCheckpoint(_))));
        }
        let mut garbled = bytes.clone();
        garbled[25] = b'!';
        assert!(matches!(decode_model::<f32>(&garbled), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_model::<f32>(b"not a checkpoint at all"), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn train_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::defaults(Task::Mnist);
        c.n_initial = 4;
        let mut state = TrainState::<f32>::new(&c).unwrap();
        let mut opt = std::mem::replace(&mut state.optimizer, Adam::new(AdamConfig::default()));
        let s = opt.begin_step(1e-3);
        let mut i = 0;
        state.model.visit_params(&mut |_, p| {
            p.grad.fill(0.5);
            opt.update(i, p, s);
            i += 1;
        });
        state.optimizer = opt;
        state.epoch = 1;
        let (mp, sp) = (dir.path().join("m"), dir.path().join("s"));
        save_train_state(&mp, &sp, &mut state, "cfg").unwrap();
        let back = load_train_state::<f32>(&mp, &sp, "cfg").unwrap();
        assert_eq!(back.optimizer.step, 1);
        assert_eq!(back.optimizer.first, state.optimizer.first);
        assert_eq!(back.optimizer.second, state.optimizer.second);
        assert!(load_train_state::<f32>(&mp, &sp, "other").is_err());
    }
}
