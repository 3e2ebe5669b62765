//! Versioned binary checkpoint container.
//!
//! Layout: magic `VDPOCKPT`, a little-endian u32 format version, a 32-byte
//! SHA-256 digest of the payload, then the payload itself: the model config
//! (JSON bytes), named tensors (little-endian 64-bit reals), and named u64
//! metadata entries. Loads verify the digest before anything is returned,
//! so a corrupted file never yields a partial state.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{ModelConfig, PolicyParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VDPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub metas: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn meta(&self, name: &str) -> Option<u64> {
        self.metas.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn payload(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let config = serde_json::to_vec(&self.config)?;
        out.extend((config.len() as u32).to_le_bytes());
        out.extend(config);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend(tensor.to_le_bytes());
        }
        out.extend((self.metas.len() as u32).to_le_bytes());
        for (name, value) in &self.metas {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend(value.to_le_bytes());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload()?;
        let digest = Sha256::digest(&payload);
        let mut out = Vec::with_capacity(44 + payload.len());
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(digest);
        out.extend(payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let stored_digest = r.take(32)?.to_vec();
        let payload = r.rest();
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored_digest.as_slice() {
            return Err(Error::Checkpoint("content digest mismatch".into()));
        }

        let mut r = Reader::new(payload);
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
        let tensor_count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            tensors.push((
                name,
                Tensor::new(shape, values)
                    .map_err(|e| Error::Checkpoint(format!("bad tensor: {e}")))?,
            ));
        }
        let meta_count = r.u32()? as usize;
        let mut metas = Vec::with_capacity(meta_count);
        for _ in 0..meta_count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("bad meta name: {e}")))?;
            metas.push((name, r.u64()?));
        }
        Ok(Checkpoint {
            config,
            tensors,
            metas,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.at..]
    }
}

/// Write a bare parameter checkpoint under the `policy.` prefix.
pub fn save_params(params: &PolicyParams, path: &Path) -> Result<()> {
    params_checkpoint(params).save(path)
}

pub fn params_checkpoint(params: &PolicyParams) -> Checkpoint {
    let tensors = PolicyParams::TENSOR_NAMES
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| (format!("policy.{name}"), t.clone()))
        .collect();
    Checkpoint {
        config: params.config.clone(),
        tensors,
        metas: Vec::new(),
    }
}

/// Extract a named parameter set (`prefix.embed`, `prefix.w_v`, ...).
pub fn params_from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<PolicyParams> {
    let mut tensors = Vec::with_capacity(8);
    for name in PolicyParams::TENSOR_NAMES {
        let key = format!("{prefix}.{name}");
        let t = ckpt
            .tensor(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        tensors.push(t.clone());
    }
    PolicyParams::from_tensors(ckpt.config.clone(), tensors)
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let ckpt = Checkpoint::load(path)?;
    params_from_checkpoint(&ckpt, "policy")
}
