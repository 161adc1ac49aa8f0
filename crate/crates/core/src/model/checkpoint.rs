//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header and the raw little-endian tensor payloads.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, ParamTensor, Real};

pub const MAGIC: &[u8; 8] = b"GAS2SCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// byte offset from the start of the payload section
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: IndexMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<serde_json::Value>,
}

/// Model parameters plus optional named auxiliary tensors (optimizer
/// moments) and an opaque training-state record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub aux: ParamStore<T>,
    pub train_state: Option<serde_json::Value>,
}

const AUX_PREFIX: &str = "aux/";

impl<T: Real> Checkpoint<T> {
    pub fn new(config: ModelConfig, params: ParamStore<T>) -> Self {
        Checkpoint {
            config,
            params,
            aux: ParamStore::new(),
            train_state: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = IndexMap::new();
        let mut payload = Vec::new();
        let all = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .chain(self.aux.iter().map(|(n, t)| (format!("{AUX_PREFIX}{n}"), t)));
        for (name, t) in all {
            if tensors.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            tensors.insert(
                name,
                TensorEntry {
                    shape: t.shape.clone(),
                    dtype: T::DTYPE,
                    offset: payload.len() as u64,
                },
            );
            for &x in &t.data {
                x.write_le(&mut payload);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
            train_state: self.train_state.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::json("checkpoint header", e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &bytes[16 + hlen..];
        let size = T::DTYPE.size();
        let mut params = ParamStore::new();
        let mut aux = ParamStore::new();
        let mut expected_offset = 0u64;
        for (name, entry) in &header.tensors {
            if entry.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} is {:?}, loader expects {:?}",
                    entry.dtype,
                    T::DTYPE
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("tensor {name} has a non-contiguous offset")));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = payload
                .get(start..start + n * size)
                .ok_or_else(|| Error::Checkpoint(format!("payload of {name} is truncated")))?;
            let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
            let t = ParamTensor::new(entry.shape.clone(), data)?;
            match name.strip_prefix(AUX_PREFIX) {
                Some(rest) => aux.insert(rest, t)?,
                None => params.insert(name.clone(), t)?,
            };
            expected_offset += (n * size) as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            aux,
            train_state: header.train_state,
        })
    }

    /// Writes through a temporary file and renames, so a crash never
    /// leaves a half-written checkpoint under the final name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Gas2s;

    #[test]
    fn bytes_round_trip_exactly() {
        let model = Gas2s::<f32>::new(ModelConfig::tiny(50, 3), 4).unwrap();
        let mut ck = Checkpoint::new(model.config().clone(), model.params().clone());
        ck.aux = model.params().zeros_like();
        ck.train_state = Some(serde_json::json!({"step": 7, "lr": 0.001}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption_and_dtype_mismatch() {
        let model = Gas2s::<f32>::new(ModelConfig::tiny(50, 3), 4).unwrap();
        let bytes = Checkpoint::new(model.config().clone(), model.params().clone())
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"nonsense-nonsense").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
