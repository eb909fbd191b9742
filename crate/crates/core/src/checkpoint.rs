//! Binary checkpoint: `DLNC` magic, little-endian u32 format version,
//! little-endian u32 header length, JSON header, then every weight tensor as
//! little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{MaskConfig, ScalerParams};
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"DLNC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    input_scaler: ScalerParams,
    target_scaler: ScalerParams,
    mask: MaskConfig,
    best_epoch: usize,
    best_val_mse: f64,
    weights: Vec<WeightEntry>,
}

/// Everything needed to reproduce training-time inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub input_scaler: ScalerParams,
    pub target_scaler: ScalerParams,
    pub mask: MaskConfig,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config().clone(),
            input_scaler: self.input_scaler.clone(),
            target_scaler: self.target_scaler.clone(),
            mask: self.mask.clone(),
            best_epoch: self.best_epoch,
            best_val_mse: self.best_val_mse,
            weights: self
                .model
                .specs()
                .iter()
                .map(|s| WeightEntry { name: s.name.clone(), shape: s.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n: usize = self.model.params().iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let hlen = word(8) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(format_err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..body]).map_err(|e| format_err(format!("header: {e}")))?;
        header.config.validate()?;

        let mut cursor = body;
        let mut params = Vec::with_capacity(header.weights.len());
        for w in &header.weights {
            let n: usize = w.shape.iter().product();
            let end = cursor + 4 * n;
            if end > bytes.len() {
                return Err(format_err(format!("truncated data for {}", w.name)));
            }
            let data = bytes[cursor..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Tensor::new(&w.shape, data).map_err(|e| format_err(format!("{}: {e}", w.name)))?);
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        let model = Model::from_params(&header.config, params)?;
        let names: Vec<&str> = model.specs().iter().map(|s| s.name.as_str()).collect();
        let stored: Vec<&str> = header.weights.iter().map(|w| w.name.as_str()).collect();
        if names != stored {
            return Err(format_err(format!("weight names {stored:?} do not match architecture {names:?}")));
        }
        Ok(Self {
            model,
            input_scaler: header.input_scaler,
            target_scaler: header.target_scaler,
            mask: header.mask,
            best_epoch: header.best_epoch,
            best_val_mse: header.best_val_mse,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}
