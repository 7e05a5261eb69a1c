//! Self-describing checkpoint container.
//!
//! Layout: magic `DBCK`, format version, a JSON header recording the full
//! operating point (net, SDE, STFT, time grid), then named parameter arrays
//! as little-endian f32. Training state (EMA shadow, Adam moments) rides
//! along as additional named arrays.

use super::net::{NetConfig, ParamVec};
use crate::sde::SdeParams;
use crate::spectral::StftConfig;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DBCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (supported: {FORMAT_VERSION})")]
    BadVersion(u32),
    #[error("truncated checkpoint at byte offset {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("missing array {0}")]
    MissingArray(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub net: NetConfig,
    pub sde: SdeParams,
    pub stft: StftConfig,
    /// Inference time grid (ascending diffusion times).
    pub grid: Vec<f64>,
    /// Streaming context window the model was trained with.
    pub k_frames: usize,
    pub trained_steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&[f32], CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.as_slice())
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn param_vec(&self, name: &str) -> Result<ParamVec, CheckpointError> {
        Ok(ParamVec { data: self.array(name)?.iter().map(|&v| v as f64).collect() })
    }

    pub fn push_params(&mut self, name: &str, params: &ParamVec) {
        self.arrays.push((
            name.to_string(),
            vec![params.len()],
            params.data.iter().map(|&v| v as f32).collect(),
        ));
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes().map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        let mut f = File::create(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        f.write_all(&bytes)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, serde_json::Error> {
        let header_json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        struct Cur<'a> {
            buf: &'a [u8],
            pos: usize,
        }
        impl<'a> Cur<'a> {
            fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
                if self.pos + n > self.buf.len() {
                    return Err(CheckpointError::Truncated { offset: self.buf.len(), what });
                }
                let s = &self.buf[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
        }
        let mut cur = Cur { buf: bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let ver = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
        if ver != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(ver));
        }
        let hlen = u32::from_le_bytes(cur.take(4, "header length")?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen, "header")?)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        let count = u32::from_le_bytes(cur.take(4, "array count")?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen =
                u16::from_le_bytes(cur.take(2, "array name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(nlen, "array name")?.to_vec())
                .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
            let ndim = cur.take(1, "array rank")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(
                    u32::from_le_bytes(cur.take(4, "array dim")?.try_into().unwrap()) as usize
                );
            }
            let len = u64::from_le_bytes(cur.take(8, "array length")?.try_into().unwrap()) as usize;
            let raw = cur.take(len * 4, "array data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            arrays.push((name, shape, data));
        }
        Ok(Self { header, arrays })
    }
}
