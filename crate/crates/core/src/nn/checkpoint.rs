//! Model checkpoints: a JSON header describing the architecture followed by
//! one raw little-endian f64 payload holding every parameter tensor in
//! header order, integrity-checked by a SHA-256 digest stored in the header.
//!
//! Container layout: `u32 LE header length | header JSON | payload`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseSepConv,
    SeBlock,
    Maxpool,
    Upsample,
    ConcatSkip,
    FuseMultiscale,
    SigmoidHead,
}

/// One architectural element, in network order. `params` is the analytic
/// parameter count for the element (0 for parameter-free kinds).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel size where meaningful, else 0.
    pub kernel: usize,
    pub params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: String,
    config: serde_json::Value,
    layers: Vec<LayerSpec>,
    params: Vec<ParamEntry>,
    payload_sha256: String,
}

/// A trained (or freshly initialized) model in transportable form.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Model family tag, e.g. "vri" or "rnv".
    pub model: String,
    /// Echo of the builder configuration, for provenance and revalidation.
    pub config: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    /// Named parameter tensors in serialization order.
    pub entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        for (_, t) in &self.entries {
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = hex(&Sha256::digest(&payload));
        let header = Header {
            version: 1,
            model: self.model.clone(),
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self
                .entries
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            payload_sha256: digest,
        };
        let hbytes = serde_json::to_vec(&header)?;
        let mut file = fs::File::create(path)?;
        file.write_all(&(hbytes.len() as u32).to_le_bytes())?;
        file.write_all(&hbytes)?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 4 {
            return Err(format_err!("checkpoint too short"));
        }
        let hlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if bytes.len() < 4 + hlen {
            return Err(format_err!("checkpoint header truncated"));
        }
        let header: Header = serde_json::from_slice(&bytes[4..4 + hlen])?;
        if header.version != 1 {
            return Err(format_err!("unsupported checkpoint version {}", header.version));
        }
        let payload = &bytes[4 + hlen..];
        let digest = hex(&Sha256::digest(payload));
        if digest != header.payload_sha256 {
            return Err(format_err!(
                "checkpoint payload checksum mismatch (stored {}, computed {digest})",
                header.payload_sha256
            ));
        }
        let want: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if payload.len() != want * 8 {
            return Err(format_err!(
                "checkpoint payload length {} != expected {}",
                payload.len(),
                want * 8
            ));
        }
        let mut entries = Vec::with_capacity(header.params.len());
        let mut off = 0usize;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b: [u8; 8] = payload[off + i * 8..off + i * 8 + 8].try_into().unwrap();
                data.push(f64::from_le_bytes(b));
            }
            off += n * 8;
            entries.push((p.name.clone(), Tensor::from_vec(&p.shape, data)?));
        }
        Ok(Checkpoint {
            model: header.model,
            config: header.config,
            layers: header.layers,
            entries,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
