//! VAGW: model weights as a container of named tensors.
//!
//! ```text
//! magic "VAGW" | u16 version | u32 config length | config JSON
//! u32 tensor count
//! per tensor: u32 name length | name | u8 rank | rank x u32 dims | f32 data
//! ```
//!
//! Little-endian throughout. Tensors are stored in the model's canonical
//! parameter order, so equal weights always give equal bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::format::Reader;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VAGW";
pub const WEIGHTS_VERSION: u16 = 1;

pub fn weights_to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(r.error_at(0, format!("bad magic {magic:?}, expected \"VAGW\"")));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != WEIGHTS_VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let clen = u32::from_le_bytes(r.array("config length")?) as usize;
    let cpos = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(clen, "config")?)
        .map_err(|e| r.error_at(cpos as u64, format!("bad config: {e}")))?;
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(r.array("name length")?) as usize;
        let npos = r.pos;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| r.error_at(npos as u64, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("dim")?) as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.error_at(npos as u64, format!("tensor {name} is too large")))?;
        let dpos = r.pos;
        let data: Vec<f32> = r
            .take(len, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(r.error_at((dpos + 4 * i) as u64, format!("non-finite value in {name}")));
        }
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(r.error_at(npos as u64, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.error_at(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_named(&config, tensors)
}

pub fn save_weights(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    weights_from_bytes(&bytes)
}
