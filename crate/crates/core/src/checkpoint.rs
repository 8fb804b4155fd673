//! Checkpoint container.
//!
//! ```text
//! file   := "DGKC" version:u16 meta_len:u32 meta[meta_len] tensor*
//! meta   := UTF-8 JSON: decoder variant tag, model config, vocabulary,
//!           tensor table (name, rows, cols) and optional training state
//! tensor := rows*cols f64, little-endian, row-major
//! ```
//!
//! Tensors appear in table order: model parameters, then (when training
//! state is present) the AdamW first and second moments in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::ActionVocabulary;
use crate::model::{DecoderVariant, Model, ModelConfig, ModelError};
use crate::nn::{Grads, Mat};
use crate::training::{AdamState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"DGKC";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint truncated at offset {0}")]
    Truncated(usize),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    step: usize,
    total_steps: usize,
    train_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    variant: DecoderVariant,
    model: ModelConfig,
    vocab: ActionVocabulary,
    tensors: Vec<TensorInfo>,
    train: Option<TrainMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.model.params.entries();
        let meta = Meta {
            variant: self.model.config.variant,
            model: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            tensors: entries.iter().map(|e| TensorInfo { name: e.name.clone(), rows: e.value.nrows(), cols: e.value.ncols() }).collect(),
            train: self.train.as_ref().map(|t| TrainMeta {
                config: t.config.clone(),
                step: t.step,
                total_steps: t.total_steps,
                train_len: t.train_len,
            }),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 8 * self.model.num_params() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |m: &Mat| m.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        entries.iter().for_each(|e| push(&e.value));
        if let Some(t) = &self.train {
            t.adam.m.0.iter().for_each(&mut push);
            t.adam.v.0.iter().for_each(&mut push);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 10 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let meta_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let mut pos = 10 + meta_len;
        if bytes.len() < pos {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let meta: Meta = serde_json::from_slice(&bytes[10..pos]).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        if meta.variant != meta.model.variant {
            return Err(CheckpointError::Meta("variant tag disagrees with model config".into()));
        }
        let mut read = |info: &TensorInfo| -> Result<Mat, CheckpointError> {
            let n = info.rows * info.cols;
            let end = pos + 8 * n;
            if bytes.len() < end {
                return Err(CheckpointError::Truncated(bytes.len()));
            }
            let data = bytes[pos..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            pos = end;
            Ok(Mat::from_shape_vec((info.rows, info.cols), data).expect("shape matches length"))
        };
        let params = meta.tensors.iter().map(|t| Ok((t.name.clone(), read(t)?))).collect::<Result<Vec<_>, CheckpointError>>()?;
        let model = Model::from_params(meta.model, meta.vocab, params)?;
        let train = match meta.train {
            Some(tm) => {
                let m = meta.tensors.iter().map(&mut read).collect::<Result<Vec<_>, _>>()?;
                let v = meta.tensors.iter().map(&mut read).collect::<Result<Vec<_>, _>>()?;
                Some(TrainState {
                    config: tm.config,
                    step: tm.step,
                    total_steps: tm.total_steps,
                    train_len: tm.train_len,
                    adam: AdamState { m: Grads(m), v: Grads(v) },
                })
            }
            None => None,
        };
        if pos != bytes.len() {
            return Err(CheckpointError::Meta(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { model, train })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
