//! Checkpoints.
//!
//! Little-endian: magic `MQCK`, u32 version, the model config as length-prefixed JSON, u32 tensor
//! count, then per tensor the name (u32 length + UTF-8), u32 rank, rank × u32 dims and the f32
//! payload in row-major order.

use std::path::Path;

use mqir_core::model::{Model, ModelConfig};
use mqir_core::numerics::{Array, ParamStore};

use super::binary::{Reader, Writer};
use super::{fingerprint, read_bytes, write_bytes, FormatError};

pub const MAGIC: &[u8; 4] = b"MQCK";
pub const VERSION: u32 = 1;

/// A loaded model plus the fingerprint of the bytes it came from.
pub struct Checkpoint {
    pub model: Model<f32>,
    pub id: String,
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    let config = serde_json::to_vec(&model.config).expect("model config serializes");
    w.bytes(&config);
    w.u32(model.params.len() as u32);
    for p in model.params.iter() {
        w.str(&p.name);
        let shape = p.value.shape();
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f32s(p.value.values());
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>, FormatError> {
    let (mut r, version) = Reader::open(bytes, MAGIC, "checkpoint")?;
    if version != VERSION {
        return Err(FormatError::Version { what: "checkpoint", version });
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| FormatError::Binary { what: "checkpoint", msg: format!("config: {e}") })?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(r.err("tensor rank above 4"));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let values = r.f32s(shape.iter().product())?;
        let value = Array::new(shape, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
        if params.find(&name).is_some() {
            return Err(FormatError::Invalid(format!("checkpoint: tensor {name} appears twice")));
        }
        params.insert(&name, value);
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes"));
    }
    Model::from_params(config, params).map_err(|e| FormatError::Invalid(format!("checkpoint: {e}")))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    let bytes = read_bytes(path)?;
    let model = decode_checkpoint(&bytes)?;
    Ok(Checkpoint { model, id: fingerprint(&bytes) })
}

/// Writes the checkpoint and returns its fingerprint.
pub fn write_checkpoint(path: &Path, model: &Model<f32>) -> Result<String, FormatError> {
    let bytes = encode_checkpoint(model);
    write_bytes(path, &bytes)?;
    Ok(fingerprint(&bytes))
}
