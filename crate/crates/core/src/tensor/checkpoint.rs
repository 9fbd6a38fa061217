//! Binary tensor container shared by every stored artifact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DNET"            4 bytes
//! version           u32
//! count             u32
//! count × {
//!     name_len      u32
//!     name          name_len bytes of UTF-8
//!     rank          u32
//!     dims          rank × u64
//!     data          product(dims) × f64
//! }
//! ```
//!
//! Entries are written in name order, so equal checkpoints serialize to equal
//! bytes.

use std::fs;
use std::path::Path;

use super::{Tensor, TensorMap};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: TensorMap,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds every tensor of `map` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, map: &TensorMap) {
        for (k, v) in map {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries under `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> TensorMap {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the binary layout; the error string describes what is wrong.
    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| "file too short for magic bytes".to_string())? != CHECKPOINT_MAGIC {
            return Err("bad magic bytes (expected \"DNET\")".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let count = r.u32()?;
        let mut tensors = TensorMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("tensor `{name}` size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or("tensor size overflows")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(format!("duplicate tensor `{name}`"));
            }
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.insert("a", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"DNET");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b.len(), 12 + 4 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn bad_magic_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.dnet");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("broken.dnet"), "{err}");
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::ones(&[3, 3]).unwrap());
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::btree_map(
                "[a-zA-Z0-9_./]{1,12}",
                (prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            )
        ) {
            let mut c = Checkpoint::new();
            for (name, (dims, bits)) in entries {
                let n: usize = dims.iter().product();
                // arbitrary bit patterns, including NaN payloads and signed zeros
                let data = (0..n as u64).map(|i| f64::from_bits(bits.rotate_left(i as u32))).collect();
                c.insert(name, Tensor::new(dims, data).unwrap());
            }
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
