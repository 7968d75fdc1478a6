//! Single-file array archive shared by feature caches, x-vectors, the speaker
//! pool and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "VQANARC1"
//! hlen      u64      length of the JSON header in bytes
//! header    hlen     UTF-8 JSON: {"kind", "version", "meta", "arrays": [{"name","dtype","shape","offset","len"}]}
//! payload   ...      concatenated arrays; `offset`/`len` are byte positions within the payload
//! ```
//!
//! `dtype` is one of `f32`, `f64`, `u64`, `u8`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VQANARC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U64(_) => "u64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<Array>,
}

impl Archive {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: ArrayData) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array shape/length mismatch"
        );
        self.arrays.push(Array {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let offset = payload.len();
            a.data.write_le(&mut payload);
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype().into(),
                shape: a.shape.clone(),
                offset,
                len: payload.len() - offset,
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing archive magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let payload = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(bad(format!("array {} runs past end of file", e.name)));
            };
            let raw = &payload[e.offset..end];
            let count: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" | "u64" => 8,
                "u8" => 1,
                other => return Err(bad(format!("unknown dtype {other}"))),
            };
            if raw.len() != count * width {
                return Err(bad(format!(
                    "array {}: {} bytes for shape {:?}",
                    e.name,
                    raw.len(),
                    e.shape
                )));
            }
            let data = match e.dtype.as_str() {
                "f32" => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "f64" => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "u64" => ArrayData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => ArrayData::U8(raw.to_vec()),
            };
            arrays.push(Array {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial archive.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn expect_kind(&self, kind: &str, origin: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                origin,
                format!("expected a {kind} archive, found {}", self.kind),
            ));
        }
        Ok(())
    }

    pub fn f64s(&self, name: &str, origin: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Array {
                shape,
                data: ArrayData::F64(v),
                ..
            }) => Ok((shape, v)),
            _ => Err(Error::format(origin, format!("missing f64 array {name}"))),
        }
    }

    pub fn f32s(&self, name: &str, origin: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Array {
                shape,
                data: ArrayData::F32(v),
                ..
            }) => Ok((shape, v)),
            _ => Err(Error::format(origin, format!("missing f32 array {name}"))),
        }
    }

    pub fn u64s(&self, name: &str, origin: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Array {
                data: ArrayData::U64(v),
                ..
            }) => Ok(v),
            _ => Err(Error::format(origin, format!("missing u64 array {name}"))),
        }
    }

    pub fn u8s(&self, name: &str, origin: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Array {
                data: ArrayData::U8(v),
                ..
            }) => Ok(v),
            _ => Err(Error::format(origin, format!("missing u8 array {name}"))),
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn meta_str(meta: &Value, key: &str, origin: &str) -> Result<String> {
    meta.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::format(origin, format!("header missing string field {key}")))
}

pub fn meta_u64(meta: &Value, key: &str, origin: &str) -> Result<u64> {
    meta.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(origin, format!("header missing integer field {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new("test", json!({"b": 2, "a": "x"}));
        a.push(
            "f",
            &[2, 2],
            ArrayData::F32(vec![1.0, -2.5, f32::MIN_POSITIVE, 4.0]),
        );
        a.push("d", &[3], ArrayData::F64(vec![0.1, 1e-300, -7.0]));
        a.push("n", &[1], ArrayData::U64(vec![u64::MAX]));
        a.push("m", &[0], ArrayData::U8(vec![]));
        a
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes());
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        assert!(Archive::from_bytes(b"NOTANARCHIVE0000", "mem").is_err());
        let mut bad = bytes.clone();
        bad[8] = 0xff;
        assert!(Archive::from_bytes(&bad, "mem").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        sample().write(&p).unwrap();
        assert_eq!(Archive::read(&p).unwrap(), sample());
        assert!(!p.with_extension("tmp").exists());
    }
}
