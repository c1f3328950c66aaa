//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "RFSSLCKP"
//! version  u32 LE   (currently 1)
//! hdr_len  u64 LE
//! header   hdr_len bytes of UTF-8 JSON:
//!          {"dtype": "f32", "step": .., "meta": {..},
//!           "tensors": [{"name": .., "shape": [..]}, ..]}
//! payload  every tensor in header order, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::param::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RFSSLCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(step: u64, meta: serde_json::Value) -> Self {
        Checkpoint {
            step,
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter and buffer of `module` under `prefix`.
    pub fn add_module(&mut self, module: &dyn Module<T>, prefix: &str) {
        module.visit(prefix, &mut |name, p| {
            self.tensors.push((name.to_string(), p.value.clone()))
        });
    }

    pub fn add_tensors(&mut self, prefix: &str, tensors: Vec<(String, Tensor<T>)>) {
        for (n, t) in tensors {
            self.tensors.push((crate::param::join(prefix, &n), t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Copies stored values into `module`. Every parameter must be present
    /// with a matching shape.
    pub fn load_module(&self, module: &mut dyn Module<T>, prefix: &str) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                None => err = Some(NumericsError::InvalidConfig(format!("checkpoint lacks tensor {name}"))),
                Some(t) if t.shape() != p.shape() => {
                    err = Some(NumericsError::shape("load_module", p.shape(), t.shape()))
                }
                Some(t) => p.value = t.clone(),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hdr = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * T::BYTES).sum();
        let mut out = Vec::with_capacity(20 + hdr.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
        out.extend_from_slice(&hdr);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ckpt_err(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ckpt_err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(ckpt_err(
                path,
                format!("dtype {} does not match requested {}", header.dtype, T::DTYPE),
            ));
        }
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * T::BYTES;
            if end > bytes.len() {
                return Err(ckpt_err(
                    path,
                    format!(
                        "payload truncated at {}: need {end} bytes, have {}",
                        e.name,
                        bytes.len()
                    ),
                ));
            }
            let data = bytes[pos..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(e.shape, data).map_err(|err| ckpt_err(path, err.to_string()))?;
            tensors.push((e.name, t));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(ckpt_err(path, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| NumericsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp: PathBuf = {
            let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".tmp");
            path.with_file_name(name)
        };
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| NumericsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let p = Path::new("x");
        assert!(Checkpoint::<f32>::from_bytes(b"nope", p).is_err());
        let mut c = Checkpoint::<f64>::new(3, serde_json::json!({}));
        c.tensors.push(("a".into(), Tensor::scalar(1.0)));
        let bytes = c.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes, p).is_err());
        assert_eq!(Checkpoint::<f64>::from_bytes(&bytes, p).unwrap(), c);
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    }
}
