//! Versioned checkpoint container shared by every model in the crate.
//!
//! A checkpoint is a JSON document holding named parameter tensors (shape +
//! row-major values, byte-exact via base64 of little-endian f64) plus string
//! metadata. A content hash covers everything, so corruption and tampering
//! are detected on load.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::PartHasher;
use crate::nn::ParamSet;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    /// base64 of row-major little-endian f64 bytes
    data: String,
}

/// Serialized model state: named tensors plus metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Which model family this checkpoint belongs to ("vae", "denoiser", ...).
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
    content_hash: String,
}

impl Checkpoint {
    pub fn from_params(kind: &str, params: &ParamSet, meta: BTreeMap<String, String>) -> Self {
        let tensors: Vec<TensorRecord> = params
            .iter()
            .map(|(name, v)| TensorRecord {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
                data: B64.encode(crate::hashing::f64s_to_bytes(v.iter().cloned())),
            })
            .collect();
        let content_hash = Self::compute_hash(kind, &meta, &tensors);
        Checkpoint {
            format: "checkpoint".to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors,
            content_hash,
        }
    }

    fn compute_hash(
        kind: &str,
        meta: &BTreeMap<String, String>,
        tensors: &[TensorRecord],
    ) -> String {
        let mut h = PartHasher::new("checkpoint-v1");
        h.text(kind);
        for (k, v) in meta {
            h.text(k).text(v);
        }
        for t in tensors {
            h.text(&t.name)
                .part(&(t.shape[0] as u64).to_le_bytes())
                .part(&(t.shape[1] as u64).to_le_bytes())
                .text(&t.data);
        }
        h.finish()
    }

    /// The content hash (identity of this checkpoint).
    pub fn hash(&self) -> &str {
        &self.content_hash
    }

    /// Rebuild the parameter set; verifies shapes and data lengths.
    pub fn params(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for t in &self.tensors {
            let bytes = B64
                .decode(&t.data)
                .map_err(|e| Error::Integrity(format!("tensor {}: bad base64: {e}", t.name)))?;
            let expect = t.shape[0] * t.shape[1] * 8;
            if bytes.len() != expect {
                return Err(Error::Integrity(format!(
                    "tensor {}: expected {expect} bytes, got {}",
                    t.name,
                    bytes.len()
                )));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), values)
                .map_err(|e| Error::Integrity(format!("tensor {}: {e}", t.name)))?;
            out.insert(&t.name, arr);
        }
        Ok(out)
    }

    /// Verify the stored content hash against a recomputation.
    pub fn verify(&self) -> Result<()> {
        if self.format != "checkpoint" {
            return Err(Error::Integrity(format!(
                "not a checkpoint file (format: {})",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let recomputed = Self::compute_hash(&self.kind, &self.meta, &self.tensors);
        if recomputed != self.content_hash {
            return Err(Error::Integrity(
                "checkpoint content hash mismatch".to_string(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        crate::artifacts::atomic_write(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Integrity(format!("unreadable checkpoint: {e}")))?;
        ckpt.verify()?;
        Ok(ckpt)
    }
}
