//! Checkpoint file: `C2RCKPT1`, a little-endian `u64` manifest length, the
//! JSON manifest, then the `f32` little-endian blob (parameters followed by
//! optimizer moments).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use c2r_core::codec::{CodecStats, LatentCodec};

use crate::autodiff::{Adam, Tensor};
use crate::config::StageConfig;
use crate::model::{C2rModel, ModelError};

pub const MAGIC: &[u8; 8] = b"C2RCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    Magic { path: PathBuf },
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is stage {found}, expected stage {expected}")]
    Stage { found: u8, expected: u8 },
    #[error("config hash mismatch: checkpoint {checkpoint}, current config {current}")]
    ConfigHash { checkpoint: String, current: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub len: usize,
    /// Offsets of the first and second moment arrays.
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: u8,
    pub step: u64,
    pub config_hash: String,
    /// Hash of the Stage I run a Stage II checkpoint started from.
    pub parent_hash: Option<String>,
    pub config: StageConfig,
    pub codec: CodecStats,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
    pub blob_len: usize,
    pub blob_sha256: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: C2rModel,
    pub codec: LatentCodec,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(
        stage: u8,
        step: u64,
        config: StageConfig,
        parent_hash: Option<String>,
        model: C2rModel,
        codec: LatentCodec,
        optimizer: Option<Adam>,
    ) -> Self {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage,
            step,
            config_hash: config.config_hash(),
            parent_hash,
            config,
            codec: codec.stats().clone(),
            params: Vec::new(),
            optimizer: None,
            blob_len: 0,
            blob_sha256: String::new(),
            metrics: BTreeMap::new(),
        };
        Self {
            manifest,
            model,
            codec,
            optimizer,
        }
    }

    /// Hash over every parameter value.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.model.params.iter() {
            h.update(p.name.as_bytes());
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let mut blob: Vec<f32> = Vec::new();
        let mut entries = Vec::new();
        for (_, p) in self.model.params.iter() {
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
                offset: blob.len(),
                trainable: p.trainable,
            });
            blob.extend_from_slice(&p.value.data);
        }
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let moments = opt
                .moments
                .iter()
                .map(|(name, m, v)| {
                    let m_offset = blob.len();
                    blob.extend_from_slice(m);
                    let v_offset = blob.len();
                    blob.extend_from_slice(v);
                    MomentEntry {
                        name: name.clone(),
                        len: m.len(),
                        m_offset,
                        v_offset,
                    }
                })
                .collect();
            OptimizerState {
                lr: opt.lr,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                clip_norm: opt.clip_norm,
                step: opt.step,
                moments,
            }
        });
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.manifest.params = entries;
        self.manifest.optimizer = optimizer;
        self.manifest.blob_len = blob.len();
        self.manifest.blob_sha256 = hex::encode(Sha256::digest(&bytes));
        self.manifest.codec = self.codec.stats().clone();
        let json = serde_json::to_vec(&self.manifest).expect("manifest serializes");

        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(MAGIC).map_err(io)?;
        f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&json).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic {
                path: path.to_path_buf(),
            });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| CheckpointError::Corrupt("truncated manifest".into()))?;
        let probe: serde_json::Value =
            serde_json::from_slice(body).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
        let version = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let manifest: Manifest =
            serde_json::from_value(probe).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
        let raw = &bytes[16 + mlen..];
        if raw.len() != manifest.blob_len * 4 {
            return Err(CheckpointError::Corrupt(format!(
                "blob holds {} bytes, manifest expects {}",
                raw.len(),
                manifest.blob_len * 4
            )));
        }
        if hex::encode(Sha256::digest(raw)) != manifest.blob_sha256 {
            return Err(CheckpointError::Corrupt("blob checksum mismatch".into()));
        }
        let blob: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut model = C2rModel::new(manifest.config.model.clone(), manifest.config.seed)?;
        if model.params.len() != manifest.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "manifest lists {} parameters, model has {}",
                manifest.params.len(),
                model.params.len()
            )));
        }
        for e in &manifest.params {
            let id = model
                .params
                .find(&e.name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown parameter {}", e.name)))?;
            let n: usize = e.shape.iter().product();
            if model.params.value(id).shape != e.shape || e.offset + n > blob.len() {
                return Err(CheckpointError::Corrupt(format!("parameter {} has a bad shape or offset", e.name)));
            }
            *model.params.value_mut(id) = Tensor::new(e.shape.clone(), blob[e.offset..e.offset + n].to_vec());
        }
        for e in &manifest.params {
            let id = model.params.find(&e.name).expect("checked above");
            let group = crate::autodiff::group_of(&e.name).to_string();
            if model.params.get(id).trainable != e.trainable {
                model.params.set_trainable(&group, e.trainable);
            }
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(s) => {
                let mut opt = Adam::new(s.lr, s.clip_norm);
                opt.beta1 = s.beta1;
                opt.beta2 = s.beta2;
                opt.eps = s.eps;
                opt.step = s.step;
                for m in &s.moments {
                    let get = |off: usize| {
                        blob.get(off..off + m.len)
                            .map(<[f32]>::to_vec)
                            .ok_or_else(|| CheckpointError::Corrupt(format!("moments of {} out of range", m.name)))
                    };
                    opt.moments.push((m.name.clone(), get(m.m_offset)?, get(m.v_offset)?));
                }
                Some(opt)
            }
        };
        let codec = LatentCodec::from_stats(manifest.codec.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("codec stats: {e}")))?;
        Ok(Self {
            manifest,
            model,
            codec,
            optimizer,
        })
    }

    pub fn expect_stage(&self, stage: u8) -> Result<(), CheckpointError> {
        if self.manifest.stage != stage {
            return Err(CheckpointError::Stage {
                found: self.manifest.stage,
                expected: stage,
            });
        }
        Ok(())
    }
}
