use std::fs;
use std::path::Path;

use super::{GridError, GridMap, GridSpec, NUM_CHANNELS};

const MAGIC: &[u8; 4] = b"GMAP";

/// `GMAP`, u32 C, H, W, f64 cell size, f64 extent, then C·H·W f32; all
/// little-endian.
pub fn encode_gridmap(map: &GridMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + map.data.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [NUM_CHANNELS, map.height, map.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&map.spec.cell_size.to_le_bytes());
    out.extend_from_slice(&map.spec.extent.to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_gridmap(bytes: &[u8], path: &Path) -> Result<GridMap, GridError> {
    let fmt = |detail: String| GridError::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 32 || &bytes[..4] != MAGIC {
        return Err(fmt("missing GMAP header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (c, h, w) = (u32_at(4), u32_at(8), u32_at(12));
    if c != NUM_CHANNELS {
        return Err(fmt(format!("expected {NUM_CHANNELS} channels, found {c}")));
    }
    let spec = GridSpec {
        cell_size: f64_at(16),
        extent: f64_at(24),
    };
    let payload = &bytes[32..];
    let expected = c * h * w * 4;
    if payload.len() != expected {
        return Err(fmt(format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(GridMap {
        spec,
        height: h,
        width: w,
        data,
    })
}

pub fn write_gridmap(path: &Path, map: &GridMap) -> Result<(), GridError> {
    fs::write(path, encode_gridmap(map)).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_gridmap(path: &Path) -> Result<GridMap, GridError> {
    let bytes = fs::read(path).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_gridmap(&bytes, path)
}
