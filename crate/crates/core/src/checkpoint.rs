//! SCQC checkpoint files.
//!
//! Layout: ASCII `SCQC`, little-endian `u32` version (1), little-endian `u64`
//! header length, a UTF-8 JSON header, then every tensor as little-endian
//! `f64` values in manifest order. The header echoes the training config
//! (minus `output_dir`) and lists each tensor's name, shape and byte offset
//! (relative to the start of the blob section). The codebook is the last
//! tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::models::AutoencoderParams;
use crate::quantizers::Codebook;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 4] = b"SCQC";
const VERSION: u32 = 1;
const CODEBOOK: &str = "codebook";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    in_channels: usize,
    step: u64,
    epoch: u64,
    idle_steps: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

/// Model state at one point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: AutoencoderParams,
    pub codebook: Codebook,
    pub step: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<u8> = Vec::new();
        let all = self
            .params
            .iter()
            .chain(std::iter::once((CODEBOOK, self.codebook.vectors())));
        for (name, m) in all {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
                offset: blobs.len() as u64,
            });
            for v in m.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut config = self.config.to_value();
        // where the run happened to write is not part of the model
        if let Some(obj) = config.as_object_mut() {
            obj.remove("output_dir");
        }
        let header = Header {
            config,
            in_channels: self.params.in_channels,
            step: self.step,
            epoch: self.epoch,
            idle_steps: self.codebook.idle_steps().to_vec(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an SCQC checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let blob_start = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| bad(format!("header JSON: {e}")))?;
        let blobs = &bytes[blob_start..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.shape[0] * t.shape[1];
            if t.offset != expected_offset {
                return Err(bad(format!("tensor {} at offset {}, expected {expected_offset}", t.name, t.offset)));
            }
            let start = t.offset as usize;
            let end = start + 8 * n;
            if end > blobs.len() {
                return Err(bad(format!("tensor {} runs past the end of the file", t.name)));
            }
            let data = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != blobs.len() {
            return Err(bad(format!("{} trailing bytes after the last tensor", blobs.len() - expected_offset as usize)));
        }
        let config = TrainConfig::from_value(&header.config)?;
        let (codebook_name, codebook) = tensors
            .pop()
            .ok_or_else(|| Error::Schema(vec!["/tensors: checkpoint holds no tensors".into()]))?;
        if codebook_name != CODEBOOK {
            return Err(Error::Schema(vec![format!("/tensors: last tensor is {codebook_name}, expected codebook")]));
        }
        if codebook.shape() != (config.latent_dim, config.codebook_size) {
            return Err(Error::Schema(vec![format!(
                "/tensors/codebook: shape {:?} does not match config ({}, {})",
                codebook.shape(),
                config.latent_dim,
                config.codebook_size
            )]));
        }
        let params = AutoencoderParams::from_entries(config.model, header.in_channels, config.latent_dim, tensors)?;
        let codebook = Codebook::with_idle_steps(codebook, header.idle_steps)
            .map_err(|e| Error::Schema(vec![format!("/idle_steps: {e}")]))?;
        Ok(Checkpoint {
            config,
            params,
            codebook,
            step: header.step,
            epoch: header.epoch,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
