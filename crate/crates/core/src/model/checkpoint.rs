//! Binary checkpoint: JSON header followed by little-endian f32 arrays.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, header
//! JSON, then the tensor payload described by the header's table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, Mae, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet};

pub const MAGIC: &[u8; 8] = b"SELFMAE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Random,
    Informed,
}

/// Which masking phase each completed epoch ran in, plus the detected
/// switch point.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phases: Vec<Phase>,
    /// Epoch at which the trigger condition was first met.
    pub detected_trigger: Option<usize>,
    /// First epoch trained with informed masks.
    pub first_informed_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Matrix<f32>>,
    pub v: Vec<Matrix<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn from_adam(opt: &AdamW<f32>) -> Self {
        Self {
            config: opt.config.clone(),
            m: opt.m.clone(),
            v: opt.v.clone(),
            step: opt.step,
        }
    }

    pub fn into_adam(self, params: &ParamSet<f32>) -> Result<AdamW<f32>> {
        AdamW::from_state(self.config, params, self.m, self.v, self.step)
    }
}

/// Everything needed to resume or analyze a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub phase: PhaseRecord,
    /// Opaque trainer bookkeeping (config, history, records).
    pub trainer_state: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    epoch: usize,
    step: u64,
    phase: PhaseRecord,
    optimizer: Option<(AdamWConfig, u64)>,
    tensors: Vec<TensorEntry>,
    trainer_state: serde_json::Value,
}

impl Checkpoint {
    pub fn fresh(model: &Mae<f32>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: None,
            epoch: 0,
            step: 0,
            phase: PhaseRecord::default(),
            trainer_state: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Mae<f32>> {
        Mae::from_params(self.config.clone(), self.params.clone())
    }

    /// Errors unless the stored model configuration equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint(format!(
                "model config mismatch: checkpoint has {:?}, expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::with_capacity(4 * self.params.numel() * 3);
        let mut push = |name: &str, group: Group, m: &Matrix<f32>, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group,
                rows: m.rows(),
                cols: m.cols(),
                offset: payload.len(),
            });
            for x in m.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, m) in self.params.names().iter().zip(self.params.values()) {
            push(name, Group::Param, m, &mut tensors);
        }
        if let Some(opt) = &self.optimizer {
            for (name, m) in self.params.names().iter().zip(&opt.m) {
                push(name, Group::AdamM, m, &mut tensors);
            }
            for (name, m) in self.params.names().iter().zip(&opt.v) {
                push(name, Group::AdamV, m, &mut tensors);
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            phase: self.phase.clone(),
            optimizer: self.optimizer.as_ref().map(|o| (o.config.clone(), o.step)),
            tensors,
            trainer_state: self.trainer_state.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic or truncated preamble)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.version != version {
            return Err(Error::CheckpointVersion {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &body[header_len..];
        let mut expected_end = 0usize;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for t in &header.tensors {
            let len = t.rows * t.cols * 4;
            if t.offset != expected_end || t.offset + len > payload.len() {
                return Err(bad(&format!("truncated or misplaced tensor {}", t.name)));
            }
            let data: Vec<f32> = payload[t.offset..t.offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mat = Matrix::new(t.rows, t.cols, data)?;
            match t.group {
                Group::Param => {
                    params.add(t.name.clone(), mat);
                }
                Group::AdamM => m.push(mat),
                Group::AdamV => v.push(mat),
            }
            expected_end = t.offset + len;
        }
        if expected_end != payload.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        let optimizer = match header.optimizer {
            Some((config, step)) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer moments incomplete"));
                }
                Some(OptimizerState { config, m, v, step })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("optimizer moments without optimizer header")),
        };
        // Validates names and shapes against the configuration.
        Mae::from_params(header.config.clone(), params.clone())
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit config: {e}")))?;
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            phase: header.phase,
            trainer_state: header.trainer_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
