//! Single-file parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "IQAW"
//! version    u32      1
//! meta_len   u32      length of the UTF-8 JSON metadata that follows
//! meta       bytes    configuration echo (an object; `{}` when empty)
//! count      u32      number of tensors
//! per tensor, sorted by name:
//!   name_len u32, name bytes (UTF-8, dot-separated)
//!   rank     u32
//!   dims     rank × u64
//!   data     prod(dims) × f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IQAW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArchiveTensor>,
}

impl Default for Archive {
    fn default() -> Self {
        Archive {
            meta: serde_json::Value::Object(Default::default()),
            tensors: BTreeMap::new(),
        }
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta_bytes = take(&mut r, meta_len)?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Archive(format!("metadata: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Archive(format!("`{name}` shape overflows")))?;
            let raw = take(&mut r, n.checked_mul(4).ok_or_else(|| Error::Archive("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), ArchiveTensor { shape, data }).is_some() {
                return Err(Error::Archive(format!("duplicate tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Archive(format!("{} trailing bytes", r.len())));
        }
        Ok(Archive { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Archive("unexpected end of data".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_roundtrip(entries in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,3}",
                (prop::collection::vec(1usize..4, 0..3), any::<u32>()), 0..6)) {
            let mut a = Archive::default();
            a.meta = serde_json::json!({"kind": "test"});
            for (name, (shape, seed)) in entries {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| (seed as f32) * 1e-3 - i as f32).collect();
                a.tensors.insert(name, ArchiveTensor { shape, data });
            }
            let b = Archive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_truncated_and_foreign_data() {
        let mut a = Archive::default();
        a.tensors.insert("w".into(), ArchiveTensor { shape: vec![2], data: vec![1.0, 2.0] });
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"PK\x03\x04rest").is_err());
    }

    #[test]
    fn tensor_payload_is_little_endian_f32() {
        let mut a = Archive::default();
        a.meta = serde_json::json!({});
        a.tensors.insert("x".into(), ArchiveTensor { shape: vec![1], data: vec![1.5] });
        let bytes = a.to_bytes();
        assert_eq!(&bytes[bytes.len() - 4..], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[..4], b"IQAW");
    }
}
