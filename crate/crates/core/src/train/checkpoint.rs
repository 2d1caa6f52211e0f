//! Binary checkpoints:
//!
//! ```text
//! "VLTC" | version u32 | JSON length u64 | JSON header | tensor count u64
//! per tensor: name length u16 | name | rank u8 | extents u64[rank] | f64[]
//! ```
//!
//! Integers and floats are little-endian. Parameters come first in layout
//! order, followed by the optimiser moments as `adam.m.<name>` and
//! `adam.v.<name>` when present.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState};
use crate::model::{VltConfig, VltParams};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VLTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: VltConfig,
    step: u64,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    adam: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: VltConfig,
    pub params: ParamSet,
    pub optimizer: Option<AdamState>,
    /// Completed training steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.config.clone(),
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                adam: a.config,
                step: a.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        if let Some(adam) = &self.optimizer {
            for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                for ((_, n, _), t) in self.params.iter().zip(moments) {
                    tensors.push((format!("{prefix}{n}"), t));
                }
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let json_len = r.len_u64("header length")?;
        let header: Header =
            serde_json::from_slice(r.take(json_len, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let (_, layout) = VltParams::layout(&header.model).map_err(|e| CheckpointError::Layout(e.to_string()))?;
        let n = layout.len();
        let expected = if header.optimizer.is_some() { 3 * n } else { n };
        let count = r.len_u64("tensor count")?;
        if count != expected {
            return Err(CheckpointError::Layout(format!(
                "{count} tensors, config implies {expected}"
            )));
        }
        let mut params = layout.clone();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for k in 0..count {
            let (slot, i) = (k / n, k % n);
            let id = layout.ids().nth(i).expect("index below layout length");
            let base = layout.name(id);
            let expected_name = match slot {
                0 => base.to_string(),
                1 => format!("adam.m.{base}"),
                _ => format!("adam.v.{base}"),
            };
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| CheckpointError::Header("tensor name is not UTF-8".into()))?;
            if name != expected_name {
                return Err(CheckpointError::Layout(format!(
                    "tensor {k} is {name:?}, expected {expected_name:?}"
                )));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.len_u64("extent")).collect::<Result<Vec<_>, _>>()?;
            if shape != layout.get(id).shape() {
                return Err(CheckpointError::Layout(format!(
                    "{name} has shape {shape:?}, expected {:?}",
                    layout.get(id).shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 8, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Layout(e.to_string()))?;
            match slot {
                0 => params.set(id, t).expect("shape checked"),
                1 => m.push(t),
                _ => v.push(t),
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self {
            config: header.model,
            params,
            optimizer: header.optimizer.map(|o| AdamState {
                config: o.adam,
                step: o.step,
                m,
                v,
            }),
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated {
            offset: self.bytes.len(),
            what,
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Header(format!("{what} {v} does not fit in memory")))
    }
}
