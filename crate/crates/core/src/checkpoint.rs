//! Binary checkpoint format.
//!
//! ```text
//! "MCKP" | version u32 | meta_len u32 | meta JSON | count u32 | entries...
//! entry: name_len u32 | name | ndim u32 | dims u32 × ndim | dtype u8 | raw LE data
//! ```
//!
//! All integers are little-endian. The metadata carries a SHA-256 of the tensor
//! table (count and entries) so a flipped payload byte is caught on load.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Architecture, ModelError, ModelGraph, CLASS_NAMES};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: needed {needed} byte(s) at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("{0} unexpected trailing byte(s)")]
    TrailingBytes(usize),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("tensor table checksum mismatch: metadata says {expected}, data hashes to {found}")]
    Checksum { expected: String, found: String },
    #[error("invalid tensor entry: {0}")]
    Entry(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("checkpoint is missing tensor(s): {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("checkpoint has tensor(s) the architecture does not: {}", .0.join(", "))]
    UnexpectedTensors(Vec<String>),
    #[error("tensor {name}: shape {found:?} does not match architecture shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name}: stored as {found:?}, requested {expected:?}")]
    DtypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub class_names: Vec<String>,
    pub input_shape: Vec<usize>,
    pub seed: u64,
    pub architecture: Architecture,
    /// Free-form record of how the model was produced (e.g. the training config).
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensor_sha256: String,
}

/// A model plus the provenance stored alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ModelGraph<T>,
    pub config: serde_json::Value,
}

/// One raw entry of the tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| CheckpointError::Entry(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_table<T: Scalar>(model: &ModelGraph<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    push_u32(&mut out, model.params().len())?;
    for (_, p) in model.params().iter() {
        push_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        push_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            push_u32(&mut out, d)?;
        }
        out.push(T::DTYPE.tag());
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content hash identifying a serialized checkpoint.
pub fn model_version(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..12].to_string()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ModelGraph<T>) -> Self {
        Checkpoint {
            model,
            config: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let table = encode_table(&self.model)?;
        let arch = self.model.architecture().clone();
        let meta = Metadata {
            class_names: self
                .model
                .class_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            input_shape: vec![arch.in_channels, arch.input_size, arch.input_size],
            seed: self.model.seed(),
            architecture: arch,
            config: self.config.clone(),
            tensor_sha256: sha256_hex(&table),
        };
        let meta =
            serde_json::to_vec(&meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + meta.len() + table.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        out.extend_from_slice(&table);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, table) = parse(bytes)?;
        if meta.class_names != CLASS_NAMES {
            return Err(CheckpointError::Metadata(format!(
                "class names {:?} differ from {:?}",
                meta.class_names, CLASS_NAMES
            )));
        }
        let mut model = ModelGraph::<T>::with_architecture(meta.architecture.clone(), meta.seed)?;
        let expected_input = vec![
            meta.architecture.in_channels,
            meta.architecture.input_size,
            meta.architecture.input_size,
        ];
        if meta.input_shape != expected_input {
            return Err(CheckpointError::Metadata(format!(
                "input shape {:?} inconsistent with architecture {:?}",
                meta.input_shape, expected_input
            )));
        }

        let stored: HashSet<&str> = table.iter().map(|t| t.name.as_str()).collect();
        let missing: Vec<String> = model
            .params()
            .iter()
            .filter(|(_, p)| !stored.contains(p.name.as_str()))
            .map(|(_, p)| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CheckpointError::MissingTensors(missing));
        }
        let unexpected: Vec<String> = table
            .iter()
            .filter(|t| model.params().find(&t.name).is_none())
            .map(|t| t.name.clone())
            .collect();
        if !unexpected.is_empty() {
            return Err(CheckpointError::UnexpectedTensors(unexpected));
        }
        for raw in table {
            let id = model.params().find(&raw.name).expect("checked above");
            let param = model.params_mut().get_mut(id);
            if param.value.shape() != raw.dims.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: raw.name,
                    expected: param.value.shape().to_vec(),
                    found: raw.dims,
                });
            }
            if raw.dtype != T::DTYPE {
                return Err(CheckpointError::DtypeMismatch {
                    name: raw.name,
                    expected: T::DTYPE,
                    found: raw.dtype,
                });
            }
            let data: Vec<T> = raw
                .bytes
                .chunks_exact(T::DTYPE.size())
                .map(T::read_le)
                .collect();
            param.value =
                Tensor::new(raw.dims, data).map_err(|e| CheckpointError::Entry(e.to_string()))?;
        }
        Ok(Checkpoint {
            model,
            config: meta.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Save `model` with no provenance record.
pub fn save<T: Scalar>(model: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    Ok(Checkpoint::load(path)?.model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated {
            offset: self.offset,
            needed: n,
            len: self.bytes.len(),
        })?;
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parse and verify the container without building a model.
pub fn parse(bytes: &[u8]) -> Result<(Metadata, Vec<RawTensor>)> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let meta_len = r.u32()?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;

    let table_start = r.offset;
    let count = r.u32()?;
    let mut names = HashSet::new();
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Entry("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32()?);
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| {
            CheckpointError::Entry(format!("tensor {name}: unknown dtype tag {tag}"))
        })?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| CheckpointError::Entry(format!("tensor {name}: size overflows")))?;
        let data = r.take(numel)?.to_vec();
        if !names.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        table.push(RawTensor {
            name,
            dims,
            dtype,
            bytes: data,
        });
    }
    if r.offset != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.offset));
    }
    let found = sha256_hex(&bytes[table_start..]);
    if found != meta.tensor_sha256 {
        return Err(CheckpointError::Checksum {
            expected: meta.tensor_sha256,
            found,
        });
    }
    Ok((meta, table))
}
