//! Feature files.
//!
//! Little-endian: magic `MQIR`, u32 version, u32 D_g, u32 D_r, u32 N, then, until end of
//! file, per record the id (u32 length + UTF-8), D_g f32 global values and N region slots of
//! D_r f32 features, 5 f32 geometry values `(xmin, ymin, xmax, ymax, area)` and one validity byte.

use std::path::Path;

use mqir_core::data::{FeatureRecord, Region};
use mqir_core::geometry::TraceBox;

use super::binary::{Reader, Writer};
use super::{read_bytes, write_bytes, FormatError};

pub const MAGIC: &[u8; 4] = b"MQIR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub global_dim: usize,
    pub region_dim: usize,
    pub regions: usize,
}

pub fn encode_features(records: &[FeatureRecord], dims: FeatureDims) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(dims.global_dim as u32);
    w.u32(dims.region_dim as u32);
    w.u32(dims.regions as u32);
    for r in records {
        r.check_dims(dims.global_dim, dims.region_dim, dims.regions)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        w.str(&r.image_id);
        w.f32s(&r.global);
        for reg in &r.regions {
            w.f32s(&reg.feature);
            w.f32s(&reg.geometry.to_array().map(|v| v as f32));
            w.u8(reg.valid as u8);
        }
    }
    Ok(w.buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<(FeatureDims, Vec<FeatureRecord>), FormatError> {
    let (mut r, version) = Reader::open(bytes, MAGIC, "feature file")?;
    if version != VERSION {
        return Err(FormatError::Version { what: "feature file", version });
    }
    let dims = FeatureDims { global_dim: r.u32()? as usize, region_dim: r.u32()? as usize, regions: r.u32()? as usize };
    let mut out = Vec::new();
    while !r.at_end() {
        let image_id = r.str()?;
        let global = r.f32s(dims.global_dim)?;
        let mut regions = Vec::with_capacity(dims.regions);
        for _ in 0..dims.regions {
            let feature = r.f32s(dims.region_dim)?;
            let g = r.f32s(5)?;
            let geometry = TraceBox::from_array([g[0] as f64, g[1] as f64, g[2] as f64, g[3] as f64, g[4] as f64]);
            let valid = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(r.err("validity byte must be 0 or 1")),
            };
            regions.push(Region { feature, geometry, valid });
        }
        out.push(FeatureRecord { image_id, global, regions });
    }
    Ok((dims, out))
}

pub fn read_features(path: &Path) -> Result<(FeatureDims, Vec<FeatureRecord>), FormatError> {
    decode_features(&read_bytes(path)?)
}

pub fn write_features(path: &Path, records: &[FeatureRecord], dims: FeatureDims) -> Result<(), FormatError> {
    write_bytes(path, &encode_features(records, dims)?)
}
