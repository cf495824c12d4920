//! Binary checkpoints: an 8-byte magic, a little-endian u64 header length,
//! a JSON header describing every tensor, then the raw little-endian payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Stage;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, SnNet};
use crate::nn::{Adam, AdamConfig, Init, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNNETCK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// False for the two-output separation network.
    pub merge: bool,
    pub stage: Stage,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub store: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn net(&self) -> Result<SnNet> {
        if self.meta.merge {
            SnNet::enhancement(self.meta.model.clone())
        } else {
            SnNet::separation(self.meta.model.clone())
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.adam = self.adam.as_ref().map(|a| AdamState { config: a.config, t: a.step_count() });
        let mut items: Vec<(String, TensorKind, &Tensor<T>)> = Vec::new();
        items.extend(self.store.params().map(|(n, t)| (n.to_string(), TensorKind::Param, t)));
        items.extend(self.store.buffers().map(|(n, t)| (n.to_string(), TensorKind::Buffer, t)));
        if let Some(adam) = &self.adam {
            for (n, m, v) in adam.moments() {
                items.push((n.to_string(), TensorKind::AdamM, m));
                items.push((n.to_string(), TensorKind::AdamV, v));
            }
        }
        let mut tensors = Vec::with_capacity(items.len());
        let mut payload = Vec::new();
        for (name, kind, t) in items {
            tensors.push(TensorEntry {
                name,
                kind,
                dtype: T::DTYPE.as_str().to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = serde_json::to_vec(&Header { meta, tensors })
            .map_err(|source| Error::Json { context: "checkpoint header".into(), source })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint and checks it against the network its metadata
    /// describes: every stored name must exist there with the same shape,
    /// and every declared parameter and buffer must be present.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.len() - 16;
        if hlen > body {
            return Err(Error::Checkpoint(format!("header length {hlen} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|source| Error::Json { context: "checkpoint header".into(), source })?;
        let payload = &bytes[16 + hlen..];

        let net = if header.meta.merge {
            SnNet::enhancement(header.meta.model.clone())?
        } else {
            SnNet::separation(header.meta.model.clone())?
        };
        let reference: ParamStore<T> = net.init(header.meta.seed)?;
        let mut store = ParamStore::new(header.meta.seed);
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        let mut end = 0usize;
        for e in &header.tensors {
            let dtype = DType::parse(&e.dtype)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}`: unknown dtype `{}`", e.name, e.dtype)))?;
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let stop = start + n * dtype.size();
            if stop > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name)));
            }
            end = end.max(stop);
            let data: Vec<T> = payload[start..stop]
                .chunks_exact(dtype.size())
                .map(|c| match dtype {
                    DType::F32 => T::c(f32::read_le(c) as f64),
                    DType::F64 => T::c(f64::read_le(c)),
                })
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            let expected = match e.kind {
                TensorKind::Buffer => reference.buffer(&e.name).ok(),
                _ => reference.get(&e.name).ok(),
            };
            match expected {
                None => return Err(Error::Checkpoint(format!("unknown tensor `{}`", e.name))),
                Some(x) if x.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}`: shape {:?}, network expects {:?}",
                        e.name,
                        t.shape(),
                        x.shape()
                    )))
                }
                Some(_) => {}
            }
            match e.kind {
                TensorKind::Param => {
                    store.declare(&e.name, &e.shape, Init::Zeros)?;
                    store.set(&e.name, t)?;
                }
                TensorKind::Buffer => store.declare_buffer(&e.name, t)?,
                TensorKind::AdamM => {
                    m.insert(e.name.clone(), t);
                }
                TensorKind::AdamV => {
                    v.insert(e.name.clone(), t);
                }
            }
        }
        if end != payload.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", payload.len() - end)));
        }
        let have: BTreeSet<&str> = store.params().map(|(n, _)| n).chain(store.buffers().map(|(n, _)| n)).collect();
        if let Some(missing) = reference.params().chain(reference.buffers()).map(|(n, _)| n).find(|n| !have.contains(n)) {
            return Err(Error::Checkpoint(format!("missing tensor `{missing}`")));
        }
        let adam = match header.meta.adam {
            Some(state) => Some(Adam::from_parts(state.config, state.t, m, v)?),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer moments without optimizer state".into())),
        };
        Ok(Self { meta: header.meta, store, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
