//! Versioned binary checkpoint: config text block, opaque metadata text and
//! named `f64` tensors.
//!
//! Layout: `"MECK"` | version u32 | config len u32 + UTF-8 | metadata len u32
//! + UTF-8 | tensor count u32 | per tensor: name len u32 + UTF-8, rank u32,
//! dims u32 each, little-endian f64 row-major.

use std::path::Path;

use super::{Mecformer, ModelConfig};
use crate::binio::{put_str, put_u32, to_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"MECK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form text stored alongside the weights (the task spec JSON).
    pub metadata: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(model: &Mecformer, metadata: impl Into<String>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            metadata: metadata.into(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Mecformer> {
        Mecformer::from_parts(self.config, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.num_scalars());
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_kv());
        put_str(&mut out, &self.metadata);
        put_u32(&mut out, to_u32(self.params.len(), "tensor count")?);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, to_u32(t.shape().len(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let config = ModelConfig::from_kv(&r.string("config block")?)?;
        let metadata = r.string("metadata")?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            if params.id(&name).is_some() {
                return Err(FormatError::MalformedConfig(format!("duplicate tensor {name:?}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if shape.contains(&0) {
                return Err(FormatError::ShapeOverflow(format!("tensor {name:?} has a zero dimension")));
            }
            let n_bytes = Reader::payload_len(&shape, 8, "tensor shape")?;
            let data = r.f64s(n_bytes)?;
            let tensor = Tensor::new(shape, data).expect("length checked above");
            params.insert(name, tensor);
        }
        r.finish()?;
        Ok(Checkpoint {
            config,
            metadata,
            params,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes().map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
