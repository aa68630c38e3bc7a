//! Checkpoint persistence: a JSON manifest next to one flat weight blob.
//!
//! `manifest.json` lists every tensor in walk order with shape, dtype,
//! byte range, and a sha256 digest; `weights.bin` holds the raw
//! little-endian values back to back. Optimizer moments are not saved, so
//! a resumed run restarts Adam cold at the recorded step count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, ValidationError};
use crate::scalar::Scalar;
use crate::toy::{Stage, ToyDiTConfig, ToyModel, TrainState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// One tensor's slot in the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

/// Checkpoint header: the tensor table plus training progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorMeta>,
    pub stage: Stage,
    pub step: usize,
}

fn dtype_of<T: Scalar>() -> &'static str {
    match std::mem::size_of::<T>() {
        4 => "f32",
        8 => "f64",
        other => unreachable!("scalar width {other} has no dtype tag"),
    }
}

fn append_scalar<T: Scalar>(value: T, out: &mut Vec<u8>) {
    if std::mem::size_of::<T>() == 4 {
        let v = value.to_f32().expect("f32 scalar converts to f32");
        out.extend_from_slice(&v.to_le_bytes());
    } else {
        let v = value.to_f64().expect("f64 scalar converts to f64");
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_scalar<T: Scalar>(bytes: &[u8]) -> T {
    if std::mem::size_of::<T>() == 4 {
        let v = f32::from_le_bytes(bytes.try_into().expect("4-byte slice"));
        T::from_f32(v).expect("f32 value lifts into the scalar type")
    } else {
        let v = f64::from_le_bytes(bytes.try_into().expect("8-byte slice"));
        T::from_f64(v).expect("f64 value lifts into the scalar type")
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` and `weights.bin` under `dir`, creating it if
/// needed. Byte-deterministic for a given state.
pub fn save_checkpoint<T: Scalar>(dir: &Path, state: &TrainState<T>) -> Result<(), CoreError> {
    fs::create_dir_all(dir)?;
    let elem = std::mem::size_of::<T>();
    let dtype = dtype_of::<T>();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, tensor) in state.model.weights.tensors() {
        let view = tensor.as_dyn();
        let offset = blob.len() as u64;
        for v in view.iter() {
            append_scalar(*v, &mut blob);
        }
        let byte_len = (view.len() * elem) as u64;
        tensors.push(TensorMeta {
            name,
            shape: view.shape().to_vec(),
            dtype: dtype.to_string(),
            offset,
            byte_len,
            sha256: hex_digest(&blob[offset as usize..]),
        });
    }
    let manifest = CheckpointManifest {
        tensors,
        stage: state.stage,
        step: state.step,
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ValidationError::new("checkpoint save", e.to_string()))?;
    manifest_json.push('\n');
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json)?;
    Ok(())
}

/// Reads a checkpoint back into a fresh training state for `config`.
///
/// Every tensor must match the walk of a zero-initialized model in name,
/// order, shape, and dtype, and every digest must verify; any drift is an
/// error naming the offending tensor.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    config: ToyDiTConfig,
) -> Result<TrainState<T>, CoreError> {
    let manifest_json = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_json)
        .map_err(|e| ValidationError::new("checkpoint load", format!("bad manifest: {e}")))?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let elem = std::mem::size_of::<T>();
    let dtype = dtype_of::<T>();

    let mut model = ToyModel::<T>::zeros(config)?;
    let walk = model.weights.tensors_mut();
    if walk.len() != manifest.tensors.len() {
        return Err(ValidationError::new(
            "checkpoint load",
            format!(
                "manifest lists {} tensors but the model has {}",
                manifest.tensors.len(),
                walk.len()
            ),
        )
        .into());
    }
    for ((name, mut tensor), meta) in walk.into_iter().zip(&manifest.tensors) {
        if meta.name != name {
            return Err(ValidationError::new(
                "checkpoint load",
                format!("expected tensor '{name}' but manifest lists '{}'", meta.name),
            )
            .into());
        }
        if meta.dtype != dtype {
            return Err(ValidationError::new(
                "checkpoint load",
                format!("tensor '{name}' is {} but this model loads {dtype}", meta.dtype),
            )
            .into());
        }
        let mut view = tensor.as_dyn_mut();
        if meta.shape != view.shape() {
            return Err(ValidationError::new(
                "checkpoint load",
                format!(
                    "tensor '{name}' has shape {:?} in the manifest, {:?} in the model",
                    meta.shape,
                    view.shape()
                ),
            )
            .into());
        }
        let start = meta.offset as usize;
        let end = start + meta.byte_len as usize;
        if meta.byte_len as usize != view.len() * elem || end > blob.len() {
            return Err(ValidationError::new(
                "checkpoint load",
                format!("tensor '{name}' byte range {start}..{end} does not fit the blob"),
            )
            .into());
        }
        let bytes = &blob[start..end];
        if hex_digest(bytes) != meta.sha256 {
            return Err(ValidationError::new(
                "checkpoint load",
                format!("tensor '{name}' fails its checksum; the blob is corrupt"),
            )
            .into());
        }
        for (slot, chunk) in view.iter_mut().zip(bytes.chunks_exact(elem)) {
            *slot = read_scalar(chunk);
        }
    }
    let mut state = TrainState::new(model)?;
    state.stage = manifest.stage;
    state.step = manifest.step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{
        encode_inputs, synthetic_singles, training_step, SyntheticEncoder,
    };

    fn tiny_config() -> ToyDiTConfig {
        ToyDiTConfig {
            depth: 1,
            d_model: 16,
            heads: 2,
            d_af: 8,
            d_ff: 32,
            patch_h: 96,
            patch_w: 104,
            frame_count: 5,
            l_text: 8,
            l_ref: 3,
            l_face: 3,
            diffusion_steps: 10,
            beta_start: 1e-4,
            beta_end: 2e-2,
            cfg_scale: 4.0,
            lr_stage1: 1e-3,
            lr_stage2: 5e-4,
            warmup_steps: 2,
            stage1_steps: 4,
            stage2_steps: 2,
            batch_size: 2,
        }
    }

    fn trained_state<T: Scalar>() -> TrainState<T> {
        let config = tiny_config();
        let corpus = synthetic_singles::<T>(&config, 2, 6).unwrap();
        let enc = SyntheticEncoder::new(6, config.clone()).unwrap();
        let batch: Vec<_> = corpus.iter().map(|c| encode_inputs(c, &enc).unwrap()).collect();
        let model = ToyModel::init(config, 42).unwrap();
        let mut state = TrainState::new(model).unwrap();
        let mut rng = crate::rng::stream(9, "io-train");
        training_step(&mut state, &batch, 1e-3, &mut rng).unwrap();
        state.stage = Stage::Multi;
        state
    }

    fn assert_weights_equal<T: Scalar>(a: &TrainState<T>, b: &TrainState<T>) {
        for ((name, x), (_, y)) in
            a.model.weights.tensors().into_iter().zip(b.model.weights.tensors())
        {
            let x = x.as_dyn();
            let y = y.as_dyn();
            assert!(
                x.iter().zip(y.iter()).all(|(p, q)| p == q),
                "tensor {name} changed across the roundtrip"
            );
        }
    }

    #[test]
    fn roundtrip_preserves_weights_and_progress_f64() {
        let dir = tempfile::tempdir().unwrap();
        let state = trained_state::<f64>();
        save_checkpoint(dir.path(), &state).unwrap();
        let loaded = load_checkpoint::<f64>(dir.path(), tiny_config()).unwrap();
        assert_weights_equal(&state, &loaded);
        assert_eq!(loaded.stage, Stage::Multi);
        assert_eq!(loaded.step, 1);
    }

    #[test]
    fn roundtrip_preserves_weights_f32() {
        let dir = tempfile::tempdir().unwrap();
        let state = trained_state::<f32>();
        save_checkpoint(dir.path(), &state).unwrap();
        let loaded = load_checkpoint::<f32>(dir.path(), tiny_config()).unwrap();
        assert_weights_equal(&state, &loaded);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let state = trained_state::<f64>();
        save_checkpoint(dir_a.path(), &state).unwrap();
        save_checkpoint(dir_b.path(), &state).unwrap();
        for file in [MANIFEST_FILE, WEIGHTS_FILE] {
            let a = fs::read(dir_a.path().join(file)).unwrap();
            let b = fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical saves");
        }
    }

    #[test]
    fn corrupted_blob_fails_its_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state::<f64>()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&path).unwrap();
        let mid = blob.len() / 2;
        blob[mid] ^= 0xff;
        fs::write(&path, blob).unwrap();
        let err = load_checkpoint::<f64>(dir.path(), tiny_config()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "got: {err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state::<f64>()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 16]).unwrap();
        let err = load_checkpoint::<f64>(dir.path(), tiny_config()).unwrap_err();
        assert!(err.to_string().contains("does not fit"), "got: {err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state::<f32>()).unwrap();
        let err = load_checkpoint::<f64>(dir.path(), tiny_config()).unwrap_err();
        assert!(err.to_string().contains("f32"), "got: {err}");
    }

    #[test]
    fn renamed_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state::<f64>()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let manifest = fs::read_to_string(&path).unwrap();
        fs::write(&path, manifest.replace("head.b", "head.bias")).unwrap();
        let err = load_checkpoint::<f64>(dir.path(), tiny_config()).unwrap_err();
        assert!(err.to_string().contains("head.b"), "got: {err}");
    }

    #[test]
    fn wrong_config_is_rejected_by_shape() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state::<f64>()).unwrap();
        let mut config = tiny_config();
        config.d_ff = 64;
        let err = load_checkpoint::<f64>(dir.path(), config).unwrap_err();
        assert!(err.to_string().contains("shape"), "got: {err}");
    }
}
