//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic    8 bytes   "RPOCKPT\0"
//! version  u32       1
//! hlen     u32       length of the JSON header
//! header   hlen      UTF-8 JSON (CheckpointHeader)
//! n_alpha  u64       followed by n_alpha f64 values of ᾱ_1..ᾱ_T
//! n_param  u64       followed by n_param f64 values of θ (condition table last)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{DenoiserModel, ModelConfig};
use super::schedule::{NoiseSchedule, ScheduleKind};
use crate::error::{Result, RpoError};
use crate::world::Vocab;

pub const MAGIC: &[u8; 8] = b"RPOCKPT\0";
pub const VERSION: u32 = 1;

/// Training-progress counters carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RngCounters {
    pub seed: u64,
    pub step: u64,
    /// Names of the streams consumed and their ChaCha word positions.
    pub streams: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    vocab: Vec<String>,
    data_dim: usize,
    horizon: usize,
    schedule: ScheduleKind,
    counters: RngCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub counters: RngCounters,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        use super::model::NoisePredictor;
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            vocab: self.model.vocab.tokens().to_vec(),
            data_dim: self.model.data_dim(),
            horizon: self.model.horizon(),
            schedule: self.schedule.kind,
            counters: self.counters.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(32 + json.len() + 8 * (self.model.n_params() + self.schedule.horizon()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for block in [self.schedule.alpha_bars(), self.model.params()] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(RpoError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(RpoError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        let alpha = r.f64_block()?;
        let params = r.f64_block()?;
        if r.at != bytes.len() {
            return Err(RpoError::Checkpoint("trailing bytes".into()));
        }
        if alpha.len() != header.horizon {
            return Err(RpoError::Checkpoint("schedule length disagrees with horizon".into()));
        }
        let schedule = NoiseSchedule::from_raw(header.schedule, alpha);
        let model = DenoiserModel::from_parts(
            header.model,
            Vocab::new(header.vocab),
            header.data_dim,
            &schedule,
            params,
        )
        .map_err(|e| RpoError::Checkpoint(e.to_string()))?;
        Ok(Self {
            model,
            schedule,
            counters: header.counters,
        })
    }

    /// Writes the checkpoint and returns the SHA-256 of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RpoError::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| RpoError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64_block(&mut self) -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| RpoError::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
