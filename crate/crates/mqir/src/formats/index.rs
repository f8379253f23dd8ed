//! Index files.
//!
//! Little-endian: magic `MQIX`, u32 version, provenance checkpoint and feature identifiers
//! (u32 length + UTF-8 each), u32 E, u32 row count, then per row the id followed by E f32 values.

use std::path::Path;

use mqir_core::retrieval::{Provenance, RetrievalIndex};

use super::binary::{Reader, Writer};
use super::{read_bytes, write_bytes, FormatError};

pub const MAGIC: &[u8; 4] = b"MQIX";
pub const VERSION: u32 = 1;

pub fn encode_index(index: &RetrievalIndex) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(&index.provenance.checkpoint);
    w.str(&index.provenance.features);
    w.u32(index.dim() as u32);
    w.u32(index.len() as u32);
    for (i, id) in index.ids().iter().enumerate() {
        w.str(id);
        w.f32s(index.embedding(i));
    }
    w.buf
}

pub fn decode_index(bytes: &[u8]) -> Result<RetrievalIndex, FormatError> {
    let (mut r, version) = Reader::open(bytes, MAGIC, "index")?;
    if version != VERSION {
        return Err(FormatError::Version { what: "index", version });
    }
    let provenance = Provenance { checkpoint: r.str()?, features: r.str()? };
    let dim = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let mut ids = Vec::with_capacity(rows.min(1 << 20));
    let mut emb = Vec::new();
    for _ in 0..rows {
        ids.push(r.str()?);
        emb.extend(r.f32s(dim)?);
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes"));
    }
    RetrievalIndex::new(ids, dim, emb, provenance).map_err(|e| FormatError::Invalid(format!("index: {e}")))
}

pub fn read_index(path: &Path) -> Result<RetrievalIndex, FormatError> {
    decode_index(&read_bytes(path)?)
}

pub fn write_index(path: &Path, index: &RetrievalIndex) -> Result<(), FormatError> {
    write_bytes(path, &encode_index(index))
}
