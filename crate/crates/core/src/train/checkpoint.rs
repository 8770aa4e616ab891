//! Binary checkpoint format.
//!
//! ```text
//! "SCF1" | version: u32 | header_len: u64 | header (UTF-8 JSON) | body | crc32: u32
//! ```
//! All integers little-endian. The body is every named array as raw `f64`
//! at the byte offset the header manifest records. The CRC covers header
//! and body.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::objectives::{SimilarityHeadKind, Task};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCF1";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    UnsupSimcse,
    SupSimcse,
    TwoTier,
    Transfer,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::UnsupSimcse => "unsup_simcse",
            Stage::SupSimcse => "sup_simcse",
            Stage::TwoTier => "two_tier",
            Stage::Transfer => "transfer",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Baseline, Stage::UnsupSimcse, Stage::SupSimcse, Stage::TwoTier, Stage::Transfer]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// One dev evaluation during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: Option<f64>,
    /// Dev metric per task name.
    pub dev: IndexMap<String, f64>,
    /// Model-selection score: the mean of `dev`, when any metric is defined.
    pub score: Option<f64>,
}

/// Evaluation after one pipeline stage, with fingerprints of the weights the
/// stage started from and returned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetric {
    pub stage: String,
    pub task: Task,
    pub metric: Metric,
    pub value: Option<f64>,
    pub n: usize,
    pub init_hash: String,
    pub final_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub stage: Stage,
    pub sts_head: SimilarityHeadKind,
    /// Task heads that have received training.
    pub trained_heads: Vec<Task>,
    pub history: Vec<EpochRecord>,
    pub stage_metrics: Vec<StageMetric>,
}

impl Checkpoint {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.history
            .iter()
            .filter(|r| r.score.is_some())
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.score >= r.score => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    vocab: Vocab,
    stage: Stage,
    sts_head: SimilarityHeadKind,
    trained_heads: Vec<Task>,
    history: Vec<EpochRecord>,
    stage_metrics: Vec<StageMetric>,
    arrays: Vec<ArrayEntry>,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0u64;
    for (name, t) in ckpt.params.iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let header = Header {
        version: FORMAT_VERSION,
        encoder: ckpt.encoder.clone(),
        vocab: ckpt.vocab.clone(),
        stage: ckpt.stage,
        sts_head: ckpt.sts_head,
        trained_heads: ckpt.trained_heads.clone(),
        history: ckpt.history.clone(),
        stage_metrics: ckpt.stage_metrics.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[PREFIX_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let integrity = |msg: &str| Error::Integrity(msg.to_string());
    if bytes.len() < PREFIX_LEN + 4 {
        return Err(integrity("file is too short to be a checkpoint"));
    }
    if &bytes[..4] != MAGIC {
        return Err(integrity("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| PREFIX_LEN.checked_add(l))
        .filter(|&end| end <= bytes.len() - 4)
        .ok_or_else(|| integrity("header length runs past the end of the file (truncated?)"))?;
    let crc_at = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[crc_at..].try_into().expect("4 bytes"));
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::Integrity(format!("unreadable header ({e}); file truncated or corrupt")))?;
    let body = &bytes[header_end..crc_at];
    let expected: usize = header.arrays.iter().map(|a| 8 * a.shape.iter().product::<usize>()).sum();
    if body.len() != expected {
        return Err(Error::Integrity(format!(
            "body holds {} bytes but the manifest declares {expected} (truncated?)",
            body.len()
        )));
    }
    if crc32fast::hash(&bytes[PREFIX_LEN..crc_at]) != stored {
        return Err(integrity("CRC32 mismatch"));
    }

    let mut params = ParamStore::new();
    for a in &header.arrays {
        if a.dtype != "f64" {
            return Err(Error::Integrity(format!("array {} has unsupported dtype {}", a.name, a.dtype)));
        }
        let n: usize = a.shape.iter().product();
        let start = usize::try_from(a.offset).map_err(|_| integrity("offset overflow"))?;
        let chunk = body
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Integrity(format!("array {} lies outside the body", a.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(a.name.clone(), Tensor::new(a.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        encoder: header.encoder,
        vocab: header.vocab,
        params,
        stage: header.stage,
        sts_head: header.sts_head,
        trained_heads: header.trained_heads,
        history: header.history,
        stage_metrics: header.stage_metrics,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
