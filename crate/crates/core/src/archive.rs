//! Tensor container used for checkpoints, motion bases, and sample dumps.
//!
//! Layout: 8-byte magic, u32 little-endian header length, a JSON header
//! object, then the tensor payloads back to back in little-endian order. The
//! header holds caller metadata at the top level and a `tensors` index of
//! `{name, shape, dtype, offset, nbytes}` entries, offsets relative to the
//! first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LMTARCH1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Map<String, Value>,
    pub tensors: Vec<ArchiveTensor>,
}

impl Archive {
    pub fn new(meta: Map<String, Value>) -> Self {
        Archive {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, dtype: Dtype, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ArchiveTensor {
            name: name.into(),
            shape,
            dtype,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&ArchiveTensor> {
        self.get(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name:?}")))
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::format(path, format!("header lacks field {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(path, format!("header field {key:?}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = payload.len() as u64;
            match t.dtype {
                Dtype::F32 => t
                    .data
                    .iter()
                    .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
                Dtype::F64 => t.data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            }
            entries.push(Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype,
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let mut header = self.meta.clone();
        header.insert(
            "tensors".into(),
            serde_json::to_value(entries).expect("serializable index"),
        );
        let header = serde_json::to_vec(&Value::Object(header)).expect("serializable header");
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(bad(format!("header claims {hlen} bytes, only {} present", body.len())));
        }
        let mut meta: Map<String, Value> =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("unreadable header: {e}")))?;
        let entries: Vec<Entry> = serde_json::from_value(meta.remove("tensors").unwrap_or(Value::Array(vec![])))
            .map_err(|e| bad(format!("unreadable tensor index: {e}")))?;
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let count: usize = e.shape.iter().product();
            let expected = (count * e.dtype.width()) as u64;
            if e.nbytes != expected {
                return Err(bad(format!(
                    "tensor {}: shape {:?} needs {expected} bytes, index says {}",
                    e.name, e.shape, e.nbytes
                )));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() as u64 {
                return Err(bad(format!(
                    "tensor {}: expected {end} payload bytes, file has {}",
                    e.name,
                    payload.len()
                )));
            }
            let raw = &payload[e.offset as usize..end as usize];
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.push(ArchiveTensor {
                name: e.name,
                shape: e.shape,
                dtype: e.dtype,
                data,
            });
        }
        Ok(Archive { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut meta = Map::new();
        meta.insert("format_version".into(), json!(1));
        let mut a = Archive::new(meta);
        a.push("a", vec![2, 3], Dtype::F32, vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3]);
        a.push("b", vec![1], Dtype::F64, vec![std::f64::consts::PI]);
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(b.meta["format_version"], json!(1));
        assert_eq!(b.get("b").unwrap().data[0], std::f64::consts::PI);
        assert_eq!(b.get("a").unwrap().data[5], 1e-3f32 as f64);
        assert_eq!(b.get("a").unwrap().shape, vec![2, 3]);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(Archive::from_bytes(b"garbage-bytes", Path::new("x")).is_err());
    }
}
