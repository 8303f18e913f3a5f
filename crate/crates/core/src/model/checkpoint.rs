//! Checkpoint layout: one JSON header line terminated by `\n`, then every
//! parameter tensor in declaration order as little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyTransformer};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    config: ModelConfig,
    trainable_rows: Option<BTreeMap<usize, Vec<usize>>>,
}

impl ToyTransformer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            trainable_rows: self.trainable_rows.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        for (_, t) in self.parameters() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: "<checkpoint>".into(),
            reason,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format version {}", header.format)));
        }
        let mut model = ToyTransformer::new(header.config)?;
        model.trainable_rows = header.trainable_rows;
        let body = &bytes[newline + 1..];
        let expected = model.parameter_count() * 8;
        if body.len() != expected {
            return Err(bad(format!(
                "expected {expected} parameter bytes, found {}",
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(8);
        for (_, t) in model.parameters_mut() {
            for v in t.data_mut() {
                let chunk = chunks.next().expect("length checked above");
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}
