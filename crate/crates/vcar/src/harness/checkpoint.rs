//! Checkpoints: a JSON manifest naming tensors plus one raw little-endian
//! f32 blob, integrity-checked by SHA-256. Bit-exact across save/load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::adapters::{AdapterMeta, AdapterRegistry, AdapterSet};
use crate::model::{ModelConfig, ModelParams, Vocab};
use crate::numerics::Tensor;
use crate::trainer::AdamState;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    kind: String,
    model_config: ModelConfig,
    vocab: Vec<String>,
    adapters: Vec<AdapterMeta>,
    adam_t: BTreeMap<String, usize>,
    step_count: usize,
    config_hash: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to reproduce forward passes and resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub adapters: Vec<AdapterSet<f32>>,
    pub adam: BTreeMap<String, AdamState>,
    pub step_count: usize,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn registry(&self) -> AdapterRegistry<f32> {
        let mut reg = AdapterRegistry::new();
        for set in &self.adapters {
            reg.register(set.clone());
        }
        reg
    }
}

fn manifest_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("json")
}

fn blob_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("bin")
}

/// Writes `<prefix>.json` and `<prefix>.bin`.
pub fn save(prefix: &Path, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
        let byte_offset = blob.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            byte_offset,
            byte_len: data.len() * 4,
        });
    };

    for (name, t) in ckpt.params.tensors() {
        push(format!("base/{}", name), t.shape().to_vec(), t.data());
    }
    for set in &ckpt.adapters {
        for (name, t) in set.named_tensors() {
            push(format!("adapter/{}/{}", set.id, name), t.shape().to_vec(), t.data());
        }
    }
    for (set_id, state) in &ckpt.adam {
        for (name, (m, v)) in &state.moments {
            push(format!("opt/{}/{}/m", set_id, name), vec![m.len()], m);
            push(format!("opt/{}/{}/v", set_id, name), vec![v.len()], v);
        }
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: "checkpoint".into(),
        model_config: ckpt.params.config.clone(),
        vocab: ckpt.vocab.tokens().to_vec(),
        adapters: ckpt.adapters.iter().map(AdapterSet::meta).collect(),
        adam_t: ckpt.adam.iter().map(|(k, v)| (k.clone(), v.t)).collect(),
        step_count: ckpt.step_count,
        config_hash: ckpt.config_hash.clone(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    if let Some(dir) = prefix.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(manifest_path(prefix), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(blob_path(prefix), blob)?;
    Ok(())
}

pub fn exists(prefix: &Path) -> bool {
    manifest_path(prefix).exists() && blob_path(prefix).exists()
}

pub fn load(prefix: &Path) -> Result<Checkpoint, HarnessError> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(prefix))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::SchemaVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let blob = std::fs::read(blob_path(prefix))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.blob_sha256 {
        return Err(HarnessError::ChecksumMismatch {
            path: blob_path(prefix).display().to_string(),
        });
    }

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(HarnessError::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let end = e.byte_offset + e.byte_len;
        if end > blob.len() {
            return Err(HarnessError::TruncatedBlob {
                path: blob_path(prefix).display().to_string(),
                need: end,
                found: blob.len(),
            });
        }
        let data: Vec<f32> = blob[e.byte_offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(e.shape.clone(), data)
            .map_err(|err| HarnessError::Format(format!("{}: {}", e.name, err)))?;
        tensors.insert(e.name.clone(), t);
    }

    let mut base = BTreeMap::new();
    for (name, t) in tensors.iter() {
        if let Some(n) = name.strip_prefix("base/") {
            base.insert(n.to_string(), t.clone());
        }
    }
    let params = ModelParams::from_tensors(manifest.model_config.clone(), base);

    let mut adapters = Vec::new();
    for meta in &manifest.adapters {
        let mut entries = BTreeMap::new();
        for target in &meta.targets {
            let a = tensors
                .get(&format!("adapter/{}/{}/A", meta.id, target))
                .ok_or_else(|| HarnessError::Format(format!("missing adapter tensor {}", target)))?;
            let b = tensors
                .get(&format!("adapter/{}/{}/B", meta.id, target))
                .ok_or_else(|| HarnessError::Format(format!("missing adapter tensor {}", target)))?;
            entries.insert(target.clone(), (a.clone(), b.clone()));
        }
        adapters.push(AdapterSet { id: meta.id.clone(), rank: meta.rank, alpha: meta.alpha, entries });
    }

    let mut adam: BTreeMap<String, AdamState> = BTreeMap::new();
    for (set_id, &t) in &manifest.adam_t {
        let mut state = AdamState { t, moments: BTreeMap::new() };
        let prefix_m = format!("opt/{}/", set_id);
        for (name, tensor) in tensors.iter() {
            if let Some(rest) = name.strip_prefix(&prefix_m) {
                if let Some(base_name) = rest.strip_suffix("/m") {
                    let v = tensors
                        .get(&format!("opt/{}/{}/v", set_id, base_name))
                        .ok_or_else(|| {
                            HarnessError::Format(format!("missing second moment for {}", base_name))
                        })?;
                    state
                        .moments
                        .insert(base_name.to_string(), (tensor.data().to_vec(), v.data().to_vec()));
                }
            }
        }
        adam.insert(set_id.clone(), state);
    }

    Ok(Checkpoint {
        params,
        vocab: Vocab::from_tokens(manifest.vocab),
        adapters,
        adam,
        step_count: manifest.step_count,
        config_hash: manifest.config_hash,
    })
}
