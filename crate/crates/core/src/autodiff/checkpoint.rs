//! Flat checkpoint container: an 8-byte magic, a little-endian `u64`
//! header length, a JSON header listing tensor names, shapes, dtypes and
//! byte offsets, then the little-endian payloads in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FMKCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint { meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.tensors.iter().cloned().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape().to_vec(), dtype: T::DTYPE.into(), offset };
                offset += t.len() * T::BYTES;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors }).expect("header json");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("tensor {} has dtype {}, expected {}", e.name, e.dtype, T::DTYPE)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * T::BYTES;
            let raw = payload.get(e.offset..end).ok_or_else(|| bad("truncated payload"))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_and_meta() {
        let mut c = Checkpoint::<f32>::new();
        c.meta.insert("model.head".into(), "pwc".into());
        c.push("param/a.w", Tensor::new([2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        c.push("opt/a.w/m", Tensor::zeros([4]));
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(Checkpoint::<f64>::from_bytes(&c.to_bytes()).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::<f32>::from_bytes(b"not a checkpoint").is_err());
    }
}
