//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PALGCKPT"
//! header_len u32
//! header     header_len bytes of JSON (see `Header`)
//! blocks     f64 values, one block per parameter in header order,
//!            followed by the cache block when present
//! ```
//!
//! Block offsets in the header count `f64` values from the start of the
//! block section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::FeatureCache;
use crate::autodiff::Tensor;
use crate::metrics::MetricsRecord;
use crate::params::{ParamEntry, ParamStore};

use super::config::ExperimentConfig;
use super::HarnessError;

pub const MAGIC: &[u8; 8] = b"PALGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Align,
    Train,
}

/// Where the run's random streams stand. Every stream is derived from the
/// master seed and a label, so these counters determine the full state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub stages_completed: usize,
    pub train_steps_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheInfo {
    experts: usize,
    images: usize,
    dim: usize,
    /// Population bitmap, one hex digit per four (expert, image) slots.
    populated: String,
    sealed: Vec<bool>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    config_hash: String,
    align_hash: String,
    config: ExperimentConfig,
    rng: RngState,
    queue: String,
    params: Vec<BlockInfo>,
    cache: Option<CacheInfo>,
    metrics: Vec<MetricsRecord>,
}

const QUEUE_NOTE: &str = "not stored; every training run starts from an empty queue";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ExperimentConfig,
    pub rng: RngState,
    pub params: ParamStore,
    pub cache: Option<FeatureCache>,
    pub metrics: Vec<MetricsRecord>,
}

fn pack_bits(bits: &[bool]) -> String {
    bits.chunks(4)
        .map(|c| {
            let v = c.iter().enumerate().fold(0u32, |a, (i, &b)| a | (u32::from(b) << i));
            char::from_digit(v, 16).expect("nibble")
        })
        .collect()
}

fn unpack_bits(s: &str, n: usize) -> Result<Vec<bool>, HarnessError> {
    if s.len() != n.div_ceil(4) {
        return Err(HarnessError::Checkpoint("cache bitmap length mismatch".into()));
    }
    let mut out = Vec::with_capacity(n);
    for c in s.chars() {
        let v = c
            .to_digit(16)
            .ok_or_else(|| HarnessError::Checkpoint("cache bitmap is not hex".into()))?;
        for i in 0..4 {
            if out.len() < n {
                out.push(v >> i & 1 == 1);
            }
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks: Vec<f64> = Vec::new();
        let params = self
            .params
            .entries()
            .iter()
            .map(|e| {
                let info = BlockInfo {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    frozen: e.frozen,
                    offset: blocks.len(),
                };
                blocks.extend_from_slice(e.value.data());
                info
            })
            .collect();
        let cache = self.cache.as_ref().map(|c| {
            let info = CacheInfo {
                experts: c.experts(),
                images: c.images(),
                dim: c.dim(),
                populated: pack_bits(c.bitmap()),
                sealed: c.sealed().to_vec(),
                offset: blocks.len(),
            };
            blocks.extend_from_slice(c.raw());
            info
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            config_hash: self.config.hash(),
            align_hash: self.config.align_hash(),
            config: self.config.clone(),
            rng: self.rng.clone(),
            queue: QUEUE_NOTE.into(),
            params,
            cache,
            metrics: self.metrics.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + blocks.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blocks {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let bad = |m: &str| HarnessError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let version: serde_json::Value =
            serde_json::from_slice(body).map_err(|e| HarnessError::Checkpoint(format!("header: {e}")))?;
        let found = version.get("format_version").and_then(|v| v.as_u64());
        if found != Some(u64::from(FORMAT_VERSION)) {
            return Err(HarnessError::Checkpoint(format!(
                "format_version {found:?} does not match supported version {FORMAT_VERSION}"
            )));
        }
        let header: Header =
            serde_json::from_slice(body).map_err(|e| HarnessError::Checkpoint(format!("header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match stored config"));
        }
        let raw = &bytes[12 + hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("block section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let take = |offset: usize, len: usize| {
            values
                .get(offset..offset + len)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| bad("block extends past end of file"))
        };
        let mut params = ParamStore::new();
        let mut expected = 0;
        for b in &header.params {
            let len: usize = b.shape.iter().product();
            if b.offset != expected {
                return Err(bad("parameter blocks are not contiguous"));
            }
            expected += len;
            let value = Tensor::new(b.shape.clone(), take(b.offset, len)?)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
            params
                .push_entry(ParamEntry {
                    name: b.name.clone(),
                    value,
                    frozen: b.frozen,
                })
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        }
        let cache = match &header.cache {
            None => None,
            Some(c) => {
                if c.offset != expected {
                    return Err(bad("cache block misplaced"));
                }
                let n = c.experts * c.images * c.dim;
                expected += n;
                let populated = unpack_bits(&c.populated, c.experts * c.images)?;
                Some(
                    FeatureCache::from_parts(c.experts, c.images, c.dim, take(c.offset, n)?, populated, c.sealed.clone())
                        .map_err(|e| HarnessError::Checkpoint(e.to_string()))?,
                )
            }
        };
        if expected != values.len() {
            return Err(bad("trailing data after last block"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            rng: header.rng,
            params,
            cache,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
