//! Run-state checkpoints.
//!
//! Layout: magic `FORLACKPT`, u32 LE version, 8-byte config hash, u64 LE
//! round, u64 LE body length, bincode body, then a CRC32 (LE) of all
//! preceding bytes. Random streams are counter-derived, so the body holds no
//! generator state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ClientWorker;
use crate::federation::{CommLedger, ServerState};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"FORLACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run after `round` completed rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub round: u64,
    pub server: Option<ServerState>,
    pub workers: Vec<ClientWorker>,
    pub ledger: CommLedger,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 8],
    pub state: RunState,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let body = bincode::serialize(&self.state).map_err(|e| Error::Codec(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + 48);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.state.round.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Checks the CRC, magic and version, then `expected_hash` when given.
    pub fn decode(bytes: &[u8], expected_hash: Option<[u8; 8]>) -> Result<Self> {
        let head = CHECKPOINT_MAGIC.len() + 4 + 8 + 8 + 8;
        if bytes.len() < head + 4 {
            return Err(Error::Truncated("checkpoint"));
        }
        let (data, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(data);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        if &data[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "FORLACKPT" });
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let mut take = |n: usize| {
            let s = &data[pos..pos + n];
            pos += n;
            s
        };
        let version = u32::from_le_bytes(take(4).try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let config_hash: [u8; 8] = take(8).try_into().unwrap();
        let round = u64::from_le_bytes(take(8).try_into().unwrap());
        let len = u64::from_le_bytes(take(8).try_into().unwrap()) as usize;
        if data.len() - head != len {
            return Err(Error::Truncated("checkpoint body"));
        }
        if let Some(h) = expected_hash {
            if h != config_hash {
                return Err(Error::Config("checkpoint was written for a different configuration".into()));
            }
        }
        let state: RunState = bincode::deserialize(&data[head..]).map_err(|e| Error::Codec(e.to_string()))?;
        if state.round != round {
            return Err(Error::Round {
                expected: round,
                got: state.round,
            });
        }
        Ok(Checkpoint { config_hash, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<[u8; 8]>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, expected_hash)
    }
}
