//! Model checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TQCKPT\0\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON (CheckpointHeader)
//! params   f64 values of every parameter, in header order
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::NormStats;
use crate::model::{BackboneConfig, HeadKind, Model, ModelError, QuantileLevels};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TQCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub levels: QuantileLevels,
    pub norm_stats: NormStats,
    pub seed: u64,
    /// Echo of the run configuration that produced the model.
    pub config: serde_json::Value,
    pub params: Vec<ParamSpec>,
}

pub fn encode(model: &Model, stats: &NormStats, seed: u64, config: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        backbone: model.config.clone(),
        head: model.head,
        levels: model.levels.clone(),
        norm_stats: stats.clone(),
        seed,
        config,
        params: model
            .param_names()
            .iter()
            .zip(&model.params)
            .map(|(n, p)| ParamSpec {
                name: n.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + 12 + json.len() + 8 * model.param_count() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    if bytes.len() < 8 + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20 + hlen)
        .ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let mut rest = &body[20 + hlen..];
    let mut params = Vec::with_capacity(header.params.len());
    for spec in &header.params {
        let n: usize = spec.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(CheckpointError::Format(format!("truncated parameter `{}`", spec.name)));
        }
        let data = rest[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[8 * n..];
        params.push(Tensor::new(spec.shape.clone(), data).map_err(ModelError::from)?);
    }
    if !rest.is_empty() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", rest.len())));
    }
    let model = Model::from_parts(header.backbone.clone(), header.head, header.levels.clone(), params)?;
    if model.param_names().iter().zip(&header.params).any(|(a, b)| *a != b.name) {
        return Err(CheckpointError::Format("parameter names do not match the architecture".into()));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, stats: &NormStats, seed: u64, config: serde_json::Value) -> Result<()> {
    fs::write(path, encode(model, stats, seed, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
    decode(&fs::read(path)?)
}
