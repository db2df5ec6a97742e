//! Precomputed image features.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic b"VDFT" | u32 version (1) | u32 d_img | u32 k | u64 count
//! per image: u32 id length | id bytes | d_img*k f64, row-major (d_img x k)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VDFT";
const VERSION: u32 = 1;

/// Image id to `d_img x k` region-feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    d_img: usize,
    k: usize,
    features: BTreeMap<String, Tensor>,
}

impl FeatureStore {
    pub fn new(d_img: usize, k: usize) -> Self {
        FeatureStore { d_img, k, features: BTreeMap::new() }
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn regions(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn insert(&mut self, id: &str, t: Tensor) -> Result<()> {
        if t.shape() != [self.d_img, self.k] {
            return Err(Error::Shape(format!("feature {id}: {:?}, store holds {}x{}", t.shape(), self.d_img, self.k)));
        }
        self.features.insert(id.to_string(), t);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.features.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.features.contains_key(id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_img as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.features.len() as u64).to_le_bytes());
        for (id, t) in &self.features {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Parse { location: format!("byte {pos}"), message: "truncated feature file".into() });
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != MAGIC {
            return Err(Error::Parse { location: "byte 0".into(), message: "bad magic".into() });
        }
        let u32le = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32le(take(4)?);
        if version != VERSION {
            return Err(Error::Parse { location: "header".into(), message: format!("version {version}") });
        }
        let d_img = u32le(take(4)?) as usize;
        let k = u32le(take(4)?) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut store = FeatureStore::new(d_img, k);
        for rec in 0..count {
            let len = u32le(take(4)?) as usize;
            let id = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Parse { location: format!("record {rec}"), message: "image id is not UTF-8".into() })?;
            let raw = take(8 * d_img * k)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t =
                Tensor::matrix(d_img, k, values).map_err(|e| Error::Parse { location: format!("record {rec}"), message: e.to_string() })?;
            store.insert(&id, t)?;
        }
        if pos != bytes.len() {
            return Err(Error::Parse { location: format!("byte {pos}"), message: "trailing bytes".into() });
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Reference(format!("feature file {}: {e}", path.display())))?;
        FeatureStore::from_bytes(&bytes)
    }
}
