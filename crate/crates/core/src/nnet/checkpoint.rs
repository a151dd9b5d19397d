//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (free-form metadata plus the name and shape of every array), the
//! array payloads as little-endian `f64`, and a trailing SHA-256 of all
//! preceding bytes. Loading verifies the checksum before parsing anything.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Mlp, MlpSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ESDRLCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("array `{name}` not present")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Shape(format!(
                    "array `{}` has shape {:?} but {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: self.arrays.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = MAGIC.len() + 4 + 8;
        if bytes.len() < fixed + DIGEST_LEN {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if &body[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = fixed
            .checked_add(header_len)
            .filter(|e| *e <= body.len())
            .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[fixed..header_end])?;
        let mut payload = body[header_end..].chunks_exact(8);
        let mut arrays = header.arrays;
        let expected: usize = arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected || !payload.remainder().is_empty() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} values, header declares {expected}",
                payload.len()
            )));
        }
        for a in &mut arrays {
            let n = a.shape.iter().product();
            a.data = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Stores a network's parameters under `name` and its spec under
    /// `meta["networks"][name]`.
    pub fn put_network(&mut self, name: &str, net: &Mlp) -> Result<()> {
        if !self.meta.is_object() {
            self.meta = serde_json::json!({});
        }
        let nets = self
            .meta
            .as_object_mut()
            .expect("object")
            .entry("networks")
            .or_insert_with(|| serde_json::json!({}));
        nets[name] = serde_json::to_value(net.spec())?;
        self.push(NamedArray::vector(name, net.params.clone()));
        Ok(())
    }

    /// Restores a network; fails if the stored spec differs from `expected`.
    pub fn network(&self, name: &str, expected: Option<&MlpSpec>) -> Result<Mlp> {
        let spec_value = self
            .meta
            .get("networks")
            .and_then(|n| n.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("no spec stored for network `{name}`")))?;
        let spec: MlpSpec = serde_json::from_value(spec_value.clone())?;
        if let Some(e) = expected {
            if e.layer_sizes() != spec.layer_sizes() {
                return Err(Error::Checkpoint(format!(
                    "network `{name}` has layers {:?}, expected {:?}",
                    spec.layer_sizes(),
                    e.layer_sizes()
                )));
            }
            if *e != spec {
                return Err(Error::Checkpoint(format!(
                    "network `{name}` output activation differs from the configured one"
                )));
            }
        }
        let arr = self.get(name)?;
        Mlp::from_params(spec, arr.data.clone())
            .map_err(|e| Error::Checkpoint(format!("network `{name}`: {e}")))
    }
}
