//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"VDCK"
//! u32    version (1)
//! u32    entry count
//! entry: u32 name length, name bytes (UTF-8, "module.param"),
//!        u32 rank, u64 per dimension,
//!        f64 values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VDCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::Reference(format!("checkpoint {}: {e}", path.display())))?;
    Ok(decode_checkpoint(&bytes)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(
            rows in 1usize..5,
            cols in 1usize..5,
            vals in proptest::collection::vec(proptest::num::f64::ANY, 25),
            name in "[a-z]{1,6}\\.[a-z_]{1,8}",
        ) {
            let t = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let v = Tensor::vector(vals[..3].to_vec());
            let entries = vec![(name.clone(), t), ("x.v".to_string(), v)];
            let back = decode_checkpoint(&encode_checkpoint(&entries)).unwrap();
            prop_assert_eq!(back.len(), 2);
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.values().iter().map(|x| x.to_bits()).collect();
                let b2: Vec<u64> = t2.values().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode_checkpoint(&[("a.b".into(), Tensor::vector(vec![1.0]))]);
        assert_eq!(&bytes[..4], b"VDCK");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..19], b"a.b");
        assert_eq!(&bytes[19..23], &[1, 0, 0, 0]);
        assert_eq!(&bytes[23..31], &1u64.to_le_bytes());
        assert_eq!(&bytes[31..39], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 39);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_checkpoint(&[("a.b".into(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
