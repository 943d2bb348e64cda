//! Model checkpoints: an 8-byte magic, a little-endian `u32` header length,
//! a JSON header, then every parameter as a little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use exf_core::model::{parameter_count, MlpModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EXFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const ACTIVATION: &str = "relu";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("unsupported activation `{0}`")]
    Activation(String),
    #[error("layer dims {dims:?} imply {expected} parameters, blob holds {actual}")]
    ParameterCount { dims: Vec<usize>, expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] exf_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub parameter_count: usize,
    /// Free-form training metadata; keys are emitted in sorted order.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: MlpModel,
}

impl Checkpoint {
    pub fn new(model: MlpModel, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            layer_dims: model.layer_dims().to_vec(),
            activation: ACTIVATION.to_string(),
            parameter_count: model.parameter_count(),
            metadata,
        };
        Self { header, model }
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.header.metadata.get(key).and_then(|v| v.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let params = self.model.to_flat();
        let mut out = Vec::with_capacity(12 + header.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(CheckpointError::BadMagic)?;
        let (len, rest) = rest.split_first_chunk::<4>().ok_or(CheckpointError::Truncated("header length"))?;
        let len = u32::from_le_bytes(*len) as usize;
        if rest.len() < len {
            return Err(CheckpointError::Truncated("header"));
        }
        let (header, blob) = rest.split_at(len);
        let header: CheckpointHeader = serde_json::from_slice(header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        if header.activation != ACTIVATION {
            return Err(CheckpointError::Activation(header.activation));
        }
        let expected = parameter_count(&header.layer_dims);
        if blob.len() % 8 != 0 || blob.len() / 8 != expected || header.parameter_count != expected {
            return Err(CheckpointError::ParameterCount {
                dims: header.layer_dims,
                expected,
                actual: blob.len() / 8,
            });
        }
        let params: Vec<f64> =
            blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let model = MlpModel::from_flat(&header.layer_dims, &params)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::decode(&bytes)
    }
}
