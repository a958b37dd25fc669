//! Single-file checkpoints.
//!
//! Layout: `FCLM`, format version (u32 LE), header length (u64 LE), UTF-8
//! JSON header, then the raw f32 LE payload with tensors concatenated in
//! directory order. Directory offsets are relative to the payload start.

use std::fs;
use std::path::Path;

use focusdec_core::focus::FocusParams;
use focusdec_core::model::{BaseParams, ModelConfig};
use focusdec_core::optim::{AdamW, AdamWConfig};
use focusdec_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FCLM";
pub const VERSION: u32 = 1;
const PRELUDE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: need {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("overlapping tensor entries: {name} starts at {offset} before previous end {prev_end}")]
    Overlap {
        name: String,
        offset: u64,
        prev_end: u64,
    },
    #[error("gap in tensor directory before {name} (offset {offset}, expected {expected})")]
    Gap {
        name: String,
        offset: u64,
        expected: u64,
    },
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(u64),
    #[error("invalid checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint content: {0}")]
    Content(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    /// Digest of the training configuration that produced the newest tensors.
    pub train_digest: String,
    /// Completed training steps.
    pub step: usize,
    pub tensors: Vec<Entry>,
}

/// Named tensors plus metadata, in directory order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train_digest: String,
    pub step: usize,
    pub tensors: Vec<(String, Tensor)>,
}

fn nbytes(shape: &[usize]) -> u64 {
    4 * shape.iter().product::<usize>() as u64
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<Entry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += nbytes(t.shape());
                e
            })
            .collect();
        let header = Header {
            model: self.model.clone(),
            train_digest: self.train_digest.clone(),
            step: self.step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PRELUDE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated { needed: 4, actual });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if bytes.len() < PRELUDE {
            return Err(CheckpointError::Truncated {
                needed: PRELUDE as u64,
                actual,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = PRELUDE as u64 + header_len;
        if actual < payload_start {
            return Err(CheckpointError::Truncated {
                needed: payload_start,
                actual,
            });
        }
        let header: Header = serde_json::from_slice(&bytes[PRELUDE..payload_start as usize])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut expected = 0u64;
        for e in &header.tensors {
            if e.offset < expected {
                return Err(CheckpointError::Overlap {
                    name: e.name.clone(),
                    offset: e.offset,
                    prev_end: expected,
                });
            }
            if e.offset > expected {
                return Err(CheckpointError::Gap {
                    name: e.name.clone(),
                    offset: e.offset,
                    expected,
                });
            }
            expected += nbytes(&e.shape);
        }
        let payload = &bytes[payload_start as usize..];
        let have = payload.len() as u64;
        if have < expected {
            return Err(CheckpointError::Truncated {
                needed: payload_start + expected,
                actual,
            });
        }
        if have > expected {
            return Err(CheckpointError::Trailing(have - expected));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + nbytes(&e.shape) as usize;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Content(err.to_string()))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Self {
            model: header.model,
            train_digest: header.train_digest,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    fn take(&self, names: &[(String, Vec<usize>)]) -> Result<Option<Vec<Tensor>>> {
        let mut out = Vec::with_capacity(names.len());
        for (name, shape) in names {
            match self.tensors.iter().find(|(n, _)| n == name) {
                Some((_, t)) if t.shape() == shape.as_slice() => out.push(t.clone()),
                Some((_, t)) => {
                    return Err(CheckpointError::Content(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None if out.is_empty() => return Ok(None),
                None => return Err(CheckpointError::Content(format!("missing tensor {name}"))),
            }
        }
        Ok(Some(out))
    }

    pub fn base(&self) -> Result<BaseParams> {
        let tensors = self
            .take(&BaseParams::expected_shapes(&self.model))?
            .ok_or_else(|| CheckpointError::Content("no base tensors".into()))?;
        BaseParams::from_tensors(&self.model, tensors).map_err(|e| CheckpointError::Content(e.to_string()))
    }

    pub fn focus(&self) -> Result<Option<FocusParams>> {
        match self.take(&FocusParams::expected_shapes(&self.model))? {
            None => Ok(None),
            Some(t) => FocusParams::from_tensors(&self.model, t)
                .map(Some)
                .map_err(|e| CheckpointError::Content(e.to_string())),
        }
    }

    /// Optimizer moments stored as `optim.m.<name>` / `optim.v.<name>` for the given tensors.
    pub fn optimizer(&self, config: &AdamWConfig, names: &[(String, Vec<usize>)]) -> Result<Option<AdamW>> {
        let prefixed = |p: &str| -> Vec<(String, Vec<usize>)> {
            names.iter().map(|(n, s)| (format!("optim.{p}.{n}"), s.clone())).collect()
        };
        let (Some(m), Some(v)) = (self.take(&prefixed("m"))?, self.take(&prefixed("v"))?) else {
            return Ok(None);
        };
        Ok(Some(AdamW {
            config: config.clone(),
            step: self.step as u64,
            m: m.iter().map(|t| t.to_vec()).collect(),
            v: v.iter().map(|t| t.to_vec()).collect(),
        }))
    }

    pub fn push_params(&mut self, named: Vec<(String, &Tensor)>) {
        self.tensors
            .extend(named.into_iter().map(|(n, t)| (n, t.clone())));
    }

    pub fn push_optimizer(&mut self, opt: &AdamW, names: &[(String, Vec<usize>)]) {
        for (p, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for ((n, shape), data) in names.iter().zip(moments) {
                let t = Tensor::new(shape, data.clone()).expect("moment shape matches");
                self.tensors.push((format!("optim.{p}.{n}"), t));
            }
        }
    }
}
