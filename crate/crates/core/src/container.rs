//! Named-tensor container shared by backbone checkpoints and learner
//! snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PROLCKPT"            8 bytes
//! version               u32
//! repeated tensor:
//!   name length         u32
//!   name                UTF-8
//!   dtype               u8   (0 = f32, 1 = f64)
//!   rank                u8
//!   dims                rank x u64
//!   payload             row-major values
//! crc32                 u32 over every byte between version and crc
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{load_error, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PROLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    entries: BTreeMap<String, (DType, Tensor)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.insert(name.into(), (dtype, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.entries.get(name).map(|(d, _)| *d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, (_, t))| (k.as_str(), t))
    }

    /// Fetches `name`, checking its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (name, (dtype, t)) in &self.entries {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.push(dtype.code());
            payload.push(t.rank() as u8);
            for &d in t.shape() {
                payload.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match dtype {
                DType::F32 => {
                    for &v in t.data() {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in t.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: &str| load_error(path, reason);
        if bytes.len() < MAGIC.len() + 4 + 4 {
            return Err(fail("truncated file"));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let payload = &bytes[12..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(payload) != stored_crc {
            return Err(fail("CRC mismatch (corrupt or truncated payload)"));
        }

        let mut cur = Cursor { buf: payload, pos: 0 };
        let mut entries = BTreeMap::new();
        while cur.pos < payload.len() {
            let name_len = cur.u32().ok_or_else(|| fail("truncated tensor header"))? as usize;
            let name = cur
                .take(name_len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| fail("bad tensor name"))?
                .to_string();
            let dtype = cur
                .u8()
                .and_then(DType::from_code)
                .ok_or_else(|| fail(&format!("bad dtype for `{name}`")))?;
            let rank = cur.u8().ok_or_else(|| fail("truncated tensor header"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64().ok_or_else(|| fail("truncated dims"))? as usize);
            }
            let count: usize = shape.iter().product();
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let raw = cur
                .take(count * width)
                .ok_or_else(|| fail(&format!("truncated payload for `{name}`")))?;
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.insert(name, (dtype, Tensor::new(shape, data)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| load_error(path, e.to_string()))?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut nt = NamedTensors::new();
        nt.insert("a", DType::F32, Tensor::matrix(2, 2, vec![1.0, -2.5, 0.125, 3.0]));
        nt.insert("b/c", DType::F64, Tensor::vector(vec![0.1, 1e-300, -7.0]));
        nt
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..8], b"PROLCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        // first tensor: name "a"
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes[17], 0);
        assert_eq!(bytes[18], 2);
    }

    #[test]
    fn round_trip_is_exact() {
        let nt = sample();
        let back = NamedTensors::decode(&nt.encode(), Path::new("mem")).unwrap();
        assert_eq!(back, nt);
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(NamedTensors::decode(&bytes, Path::new("m")), Err(Error::Load { .. })));

        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = NamedTensors::decode(&bytes, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");

        let bytes = sample().encode();
        assert!(NamedTensors::decode(&bytes[..bytes.len() - 9], Path::new("m")).is_err());
    }
}
