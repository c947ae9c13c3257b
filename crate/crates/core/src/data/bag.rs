//! Feature bags and their binary file format.
//!
//! Layout: `"MECB"` | version u32 | N u32 | d_f u32 | task id u32 | label
//! length u32 + UTF-8 | slide-id length u32 + UTF-8 | N·d_f little-endian f32,
//! row-major.

use std::path::Path;

use crate::binio::{put_str, put_u32, to_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"MECB";
const VERSION: u32 = 1;

/// Patch features of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub task_id: usize,
    pub label_term: String,
    patches: usize,
    d_f: usize,
    features: Vec<f32>,
}

impl FeatureBag {
    pub fn new(
        slide_id: impl Into<String>,
        task_id: usize,
        label_term: impl Into<String>,
        d_f: usize,
        features: Vec<f32>,
    ) -> Result<Self> {
        if d_f == 0 || features.is_empty() || features.len() % d_f != 0 {
            return Err(Error::shape("feature bag", &[features.len()], &[d_f]));
        }
        Ok(FeatureBag {
            slide_id: slide_id.into(),
            task_id,
            label_term: label_term.into(),
            patches: features.len() / d_f,
            d_f,
            features,
        })
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.patches, self.d_f],
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("bag shape is consistent")
    }

    /// Errors if the bag's feature width differs from what a run expects.
    pub fn expect_d_f(&self, expected: usize) -> Result<()> {
        if self.d_f != expected {
            return Err(Error::Ingestion(format!(
                "bag {:?} has d_f {} but the run expects d_f {}",
                self.slide_id, self.d_f, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(32 + self.features.len() * 4);
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, to_u32(self.patches, "patch count")?);
        put_u32(&mut out, to_u32(self.d_f, "feature width")?);
        put_u32(&mut out, to_u32(self.task_id, "task id")?);
        put_str(&mut out, &self.label_term);
        put_str(&mut out, &self.slide_id);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
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
        let patches = r.u32()? as usize;
        let d_f = r.u32()? as usize;
        let task_id = r.u32()? as usize;
        if patches == 0 || d_f == 0 {
            return Err(FormatError::ShapeOverflow(format!(
                "empty bag shape {patches}×{d_f}"
            )));
        }
        let label_term = r.string("label term")?;
        let slide_id = r.string("slide id")?;
        let n_bytes = Reader::payload_len(&[patches, d_f], 4, "bag shape")?;
        let features = r.f32s(n_bytes)?;
        r.finish()?;
        Ok(FeatureBag {
            slide_id,
            task_id,
            label_term,
            patches,
            d_f,
            features,
        })
    }
}

pub fn write_bag_file(path: &Path, bag: &FeatureBag) -> Result<()> {
    let bytes = bag.to_bytes().map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag_file(path: &Path) -> Result<FeatureBag> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBag::from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
