//! Versioned single-file model container.
//!
//! ```text
//! "AMQMODEL"  u32 version  u32 header_len  header (JSON)  blobs (f32 LE)  u32 crc32
//! ```
//!
//! The JSON header holds the layer graph with quantization and calibration
//! state plus a blob table; parameters follow in table order. The CRC covers
//! every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{Layer, ModelGraph};

pub const MAGIC: &[u8; 8] = b"AMQMODEL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BlobEntry {
    layer: usize,
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelGraph,
    blobs: Vec<BlobEntry>,
}

fn blobs_of(model: &ModelGraph) -> Vec<(usize, &'static str, &[f32])> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                out.push((i, "weight", c.weight.as_slice()));
                out.push((i, "bias", c.bias.as_slice()));
            }
            Layer::BatchNorm(bn) => {
                out.push((i, "gamma", bn.gamma.as_slice()));
                out.push((i, "beta", bn.beta.as_slice()));
                out.push((i, "mean", bn.mean.as_slice()));
                out.push((i, "var", bn.var.as_slice()));
            }
            _ => {}
        }
    }
    out
}

fn expected_len(model: &ModelGraph, layer: usize, name: &str) -> Option<usize> {
    match (model.layers.get(layer)?, name) {
        (Layer::Conv(c), "weight") => Some(c.weight_len()),
        (Layer::Conv(c), "bias") => Some(c.n_out),
        (Layer::BatchNorm(bn), "gamma" | "beta" | "mean" | "var") => Some(bn.channels),
        _ => None,
    }
}

pub fn to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    model.shapes()?;
    let blobs = blobs_of(model);
    for &(layer, name, data) in &blobs {
        let want = expected_len(model, layer, name).unwrap();
        if data.len() != want {
            return Err(Error::BlobSize {
                layer,
                blob: name.into(),
                expected: want,
                found: data.len(),
            });
        }
    }
    let header = Header {
        model: model.clone(),
        blobs: blobs
            .iter()
            .map(|&(layer, name, data)| BlobEntry {
                layer,
                name: name.into(),
                len: data.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in blobs {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn le_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::ModelFile(format!("truncated at byte {}", bytes.len())))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::ModelFile("not a model file (bad magic)".into()));
    }
    let version = le_u32(bytes, 8)?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = le_u32(bytes, 12)? as usize;
    let hend = 16 + hlen;
    let json = bytes
        .get(16..hend)
        .ok_or_else(|| Error::ModelFile(format!("header of {hlen} bytes exceeds file")))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut model = header.model;
    let declared: Vec<(usize, &str)> = blobs_of(&model).iter().map(|&(l, n, _)| (l, n)).collect();
    if declared.len() != header.blobs.len() {
        return Err(Error::ModelFile(format!(
            "blob table lists {} blobs, layers need {}",
            header.blobs.len(),
            declared.len()
        )));
    }
    for (entry, &(layer, name)) in header.blobs.iter().zip(&declared) {
        if (entry.layer, entry.name.as_str()) != (layer, name) {
            return Err(Error::ModelFile(format!(
                "blob table entry `{}` of layer {} where `{name}` of layer {layer} was expected",
                entry.name, entry.layer
            )));
        }
        let want = expected_len(&model, layer, name).unwrap();
        if entry.len != want {
            return Err(Error::BlobSize {
                layer,
                blob: name.into(),
                expected: want,
                found: entry.len,
            });
        }
    }
    let payload: usize = header.blobs.iter().map(|b| 4 * b.len).sum();
    let total = hend + payload + 4;
    if bytes.len() != total {
        return Err(Error::ModelFile(format!(
            "file is {} bytes, header implies {total}",
            bytes.len()
        )));
    }
    let stored = le_u32(bytes, total - 4)?;
    let computed = crc32fast::hash(&bytes[..total - 4]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut at = hend;
    let mut take = |len: usize| -> Vec<f32> {
        let v = bytes[at..at + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * len;
        v
    };
    for entry in &header.blobs {
        let data = take(entry.len);
        match (&mut model.layers[entry.layer], entry.name.as_str()) {
            (Layer::Conv(c), "weight") => c.weight = data,
            (Layer::Conv(c), "bias") => c.bias = data,
            (Layer::BatchNorm(bn), "gamma") => bn.gamma = data,
            (Layer::BatchNorm(bn), "beta") => bn.beta = data,
            (Layer::BatchNorm(bn), "mean") => bn.mean = data,
            (Layer::BatchNorm(bn), "var") => bn.var = data,
            _ => unreachable!("blob table validated above"),
        }
    }
    model.shapes()?;
    Ok(model)
}

pub fn read(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?)
}

pub fn write(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}
