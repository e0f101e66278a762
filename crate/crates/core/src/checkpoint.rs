//! Binary checkpoints: an 8-byte little-endian header length, a JSON header,
//! the parameters as little-endian `f64`, then optionally the Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Layout, ParameterVector};
use crate::corpus::{Schema, SplitSpec};
use crate::generator::{Generator, GeneratorError, ModelConfig, Vocabulary};
use crate::optim::{AdamState, Regime, TrainConfig};

pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("schema hash mismatch: checkpoint {stored}, corpus {actual}")]
    SchemaMismatch { stored: String, actual: String },
    #[error("layout does not match the model configuration")]
    Layout,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub schema_hash: String,
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub layout: Layout,
    pub regime: Regime,
    pub seed: u64,
    pub split: Option<SplitSpec>,
    pub split_seed: Option<u64>,
    pub train: TrainConfig,
    pub adam_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterVector,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        schema: &Schema,
        vocab: &Vocabulary,
        train: &TrainConfig,
        regime: Regime,
        seed: u64,
        split: Option<(SplitSpec, u64)>,
        params: ParameterVector,
        adam: Option<AdamState>,
    ) -> Self {
        let header = CheckpointHeader {
            version: VERSION,
            schema_hash: schema.hash(),
            schema: schema.clone(),
            vocab: vocab.clone(),
            model: train.model.clone(),
            layout: params.layout().as_ref().clone(),
            regime,
            seed,
            split_seed: split.as_ref().map(|s| s.1),
            split: split.map(|s| s.0),
            train: train.clone(),
            adam_steps: adam.as_ref().map(|a| a.t),
        };
        Self { header, params, adam }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.params.len();
        let floats = n * if self.adam.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(8 + header.len() + 8 * floats);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(self.params.as_slice());
        if let Some(a) = &self.adam {
            put(&a.m);
            put(&a.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let head_len = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| CheckpointError::Truncated("header length".into()))?;
        let body_start = 8usize
            .checked_add(head_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated("header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body_start])?;
        if header.version != VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        header.layout.validate().map_err(|_| CheckpointError::Layout)?;
        let n = header.layout.len();
        let body = &bytes[body_start..];
        let floats: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected = n * if header.adam_steps.is_some() { 3 } else { 1 };
        if body.len() % 8 != 0 || floats.len() != expected {
            return Err(CheckpointError::Truncated(format!("{} payload bytes for {expected} values", body.len())));
        }
        let layout = Arc::new(header.layout.clone());
        let params = ParameterVector::from_vec(layout, floats[..n].to_vec()).map_err(|_| CheckpointError::Layout)?;
        let adam = header.adam_steps.map(|t| AdamState {
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
            t,
            ..AdamState::new(0)
        });
        Ok(Self { header, params, adam })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the generator and checks that its layout matches.
    pub fn generator(&self) -> Result<Generator, CheckpointError> {
        let g = Generator::new(self.header.vocab.len(), self.header.schema.da_dim(), self.header.model.clone())?;
        if g.layout().as_ref() != &self.header.layout {
            return Err(CheckpointError::Layout);
        }
        Ok(g)
    }

    pub fn check_schema(&self, schema: &Schema) -> Result<(), CheckpointError> {
        let actual = schema.hash();
        if actual != self.header.schema_hash {
            return Err(CheckpointError::SchemaMismatch {
                stored: self.header.schema_hash.clone(),
                actual,
            });
        }
        Ok(())
    }
}
