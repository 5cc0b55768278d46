//! Model persistence.
//!
//! File layout, bit-exact:
//!
//! ```text
//! "RSEG" | version: u32 LE | header length: u32 LE | UTF-8 JSON header
//!        | concatenated raw little-endian f32 payloads in header order
//! ```
//!
//! The JSON header carries the network configuration and, per tensor, its
//! name, shape and byte offset into the payload region.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelWeights, NetworkConfig, KERNEL_SIDE};

pub const MAGIC: [u8; 4] = *b"RSEG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

/// Tensor names and shapes in file order, derived from the configuration.
fn tensor_layout(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    for l in 0..2 * cfg.sections() {
        let (ic, oc) = (cfg.conv_in_channels(l), cfg.conv_out_channels(l));
        layout.push((format!("conv{l}.kernel"), vec![KERNEL_SIDE, KERNEL_SIDE, ic, oc]));
        layout.push((format!("conv{l}.bias"), vec![oc]));
    }
    layout.push(("dense.weights".to_string(), vec![cfg.dense_len()]));
    layout.push(("dense.bias".to_string(), vec![1]));
    layout
}

fn payload_blocks<'a>(model: &'a ModelWeights<f32>) -> Vec<&'a [f32]> {
    let mut blocks = Vec::new();
    for layer in &model.conv_layers {
        blocks.push(layer.kernel.as_slice());
        blocks.push(layer.bias.as_slice());
    }
    blocks.push(model.dense.weights.as_slice());
    blocks.push(std::slice::from_ref(&model.dense.bias));
    blocks
}

pub fn encode_model(model: &ModelWeights<f32>, cfg: &NetworkConfig) -> Result<Vec<u8>> {
    model.matches(cfg)?;
    let layout = tensor_layout(cfg);
    let blocks = payload_blocks(model);
    debug_assert_eq!(layout.len(), blocks.len());

    let mut tensors = Vec::with_capacity(layout.len());
    let mut offset = 0u64;
    for ((name, shape), block) in layout.into_iter().zip(&blocks) {
        tensors.push(TensorEntry {
            name,
            shape,
            byte_offset: offset,
        });
        offset += 4 * block.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: cfg.clone(),
        tensors,
    })?;

    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for block in blocks {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelWeights<f32>, NetworkConfig)> {
    if bytes.len() < 12 {
        return Err(Error::Model("file too short for the fixed header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Model(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Model(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - 12
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let cfg = header.config;
    let payload = &bytes[12 + header_len..];

    // Validate the tensor list against the configuration before reading.
    let expected = tensor_layout(&cfg);
    if header.tensors.len() != expected.len() {
        return Err(Error::Model(format!(
            "header lists {} tensors, config expects {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Model(format!(
                "tensor '{}' out of order, expected '{name}'",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::Model(format!(
                "tensor '{}' has shape {:?}, config expects {:?}",
                entry.name, entry.shape, shape
            )));
        }
        if entry.byte_offset != offset {
            return Err(Error::Model(format!(
                "tensor '{}' at byte offset {}, expected {offset}",
                entry.name, entry.byte_offset
            )));
        }
        offset += 4 * shape.iter().product::<usize>() as u64;
    }
    if payload.len() as u64 != offset {
        return Err(Error::Model(format!(
            "payload is {} bytes, header expects {offset}",
            payload.len()
        )));
    }

    let mut model = ModelWeights::zeros(&cfg);
    {
        let mut blocks: Vec<&mut [f32]> = model.param_blocks_mut();
        let mut pos = 0usize;
        for (block, entry) in blocks.iter_mut().zip(&header.tensors) {
            for (i, v) in block.iter_mut().enumerate() {
                let o = pos + 4 * i;
                let raw: [u8; 4] = payload[o..o + 4].try_into().map_err(|_| {
                    Error::Model(format!("payload truncated inside tensor '{}'", entry.name))
                })?;
                *v = f32::from_le_bytes(raw);
            }
            pos += 4 * block.len();
        }
    }
    Ok((model, cfg))
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &ModelWeights<f32>,
    cfg: &NetworkConfig,
) -> Result<()> {
    Ok(fs::write(path, encode_model(model, cfg)?)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelWeights<f32>, NetworkConfig)> {
    decode_model(&fs::read(path)?)
}
