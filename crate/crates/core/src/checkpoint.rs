//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CFLOWCKP" | u32 version | u32 n, n bytes of JSON metadata
//! u32 entries | per entry: u32 len, name, u64 rows, u64 cols
//! u64 count, count x f64 parameters
//! u64 count, count x f64 first moments | u64 count, count x f64 second moments
//! 32-byte SHA-256 of everything before it
//! ```
//!
//! Moment vectors are empty when no optimizer state is stored.

use crate::config::DagSpec;
use crate::flow::FlowConfig;
use crate::model::{flatten, manifest, unflatten, FlowModel, ModelConfig};
use crate::trainer::{Adam, TrainState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CFLOWCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("manifest does not match payload: {0}")]
    ManifestMismatch(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dag: DagSpec,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub ema: Option<f64>,
    /// `None` before the first step.
    pub ema_min: Option<f64>,
    /// Echo of the experiment configuration, if any.
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub manifest: Vec<(String, (usize, usize))>,
    pub params: Vec<f64>,
    pub first_moments: Vec<f64>,
    pub second_moments: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &FlowModel, state: Option<&TrainState>, config: Option<serde_json::Value>) -> Self {
        let (epoch, step, adam_t, ema, ema_min, m, v) = match state {
            Some(s) => (
                s.epoch,
                s.step,
                s.adam.t,
                s.ema,
                s.ema_min.is_finite().then_some(s.ema_min),
                s.adam.m.clone(),
                s.adam.v.clone(),
            ),
            None => (0, 0, 0, None, None, Vec::new(), Vec::new()),
        };
        Self {
            meta: CheckpointMeta {
                dag: DagSpec::from_dag(model.dag()),
                model: model.config().clone(),
                flow: model.flow,
                epoch,
                step,
                adam_t,
                ema,
                ema_min,
                config,
            },
            manifest: manifest(model),
            params: flatten(model),
            first_moments: m,
            second_moments: v,
        }
    }

    pub fn model(&self) -> Result<FlowModel, CheckpointError> {
        let dag = self
            .meta
            .dag
            .build()
            .map_err(|e| CheckpointError::ManifestMismatch(e.to_string()))?;
        let mut model = FlowModel::zeros(dag, self.meta.model.clone(), self.meta.flow);
        if manifest(&model) != self.manifest {
            return Err(CheckpointError::ManifestMismatch(
                "stored shapes differ from the configured model".into(),
            ));
        }
        unflatten(&mut model, &self.params)
            .map_err(|n| CheckpointError::ManifestMismatch(format!("expected {n} parameters")))?;
        Ok(model)
    }

    /// Training state to resume from; fresh moments when none were stored.
    pub fn train_state(&self) -> TrainState {
        let n = self.params.len();
        let adam = if self.first_moments.len() == n {
            Adam {
                m: self.first_moments.clone(),
                v: self.second_moments.clone(),
                t: self.meta.adam_t,
            }
        } else {
            Adam::new(n)
        };
        TrainState {
            epoch: self.meta.epoch,
            step: self.meta.step,
            adam,
            ema: self.meta.ema,
            ema_min: self.meta.ema_min.unwrap_or(f64::INFINITY),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for (name, (r, c)) in &self.manifest {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(*r as u64).to_le_bytes());
            out.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        for v in [&self.params, &self.first_moments, &self.second_moments] {
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)?;
        let entries = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(entries);
        for _ in 0..entries {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::ManifestMismatch("parameter name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            manifest.push((name, (rows, cols)));
        }
        let params = r.f64s()?;
        let first_moments = r.f64s()?;
        let second_moments = r.f64s()?;
        if r.pos != body.len() {
            return Err(CheckpointError::ManifestMismatch("trailing bytes".into()));
        }
        let expected: usize = manifest.iter().map(|(_, (a, b))| a * b).sum();
        if expected != params.len() {
            return Err(CheckpointError::ManifestMismatch(format!(
                "manifest lists {expected} values, payload has {}",
                params.len()
            )));
        }
        if first_moments.len() != second_moments.len()
            || !(first_moments.is_empty() || first_moments.len() == params.len())
        {
            return Err(CheckpointError::ManifestMismatch("optimizer state length".into()));
        }
        Ok(Self {
            meta,
            manifest,
            params,
            first_moments,
            second_moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CausalDag;
    use crate::trainer::{train, TrainConfig};
    use crate::data::SeriesBatch;

    fn model() -> FlowModel {
        let dag = CausalDag::new(3, &[(0, 1), (0, 2)]).unwrap();
        let cfg = ModelConfig {
            hidden_dim: 4,
            width: 8,
            layers: 3,
            per_node_rnn: false,
        };
        FlowModel::new(dag, cfg, FlowConfig::default(), 5)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut m = model();
        let vals: Vec<f64> = (0..2 * 3 * 10).map(|i| (i as f64 * 0.7).sin()).collect();
        let data = SeriesBatch::new(2, 3, 7, 10, vals, vec![0, 0]).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut st = TrainState::fresh(&m);
        train(&mut m, &data, &cfg, &mut st, &mut |_, _| Ok(())).unwrap();
        let ck = Checkpoint::new(&m, Some(&st), Some(serde_json::json!({"seed": 3})));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model().unwrap(), m);
        assert_eq!(back.train_state(), st);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint::new(&model(), None, None);
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::ChecksumMismatch)));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(CheckpointError::BadMagic)));
        let good = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&good[..20]),
            Err(CheckpointError::ChecksumMismatch | CheckpointError::Truncated)
        ));
    }

    #[test]
    fn manifest_must_match_model() {
        let mut ck = Checkpoint::new(&model(), None, None);
        ck.meta.model.width = 9;
        assert!(matches!(ck.model(), Err(CheckpointError::ManifestMismatch(_))));
    }
}
