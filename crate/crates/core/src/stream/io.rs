use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::raster::{GridConfig, OccupancyGrid};
use crate::{Error, Result};

pub const OCC_MAGIC: &[u8; 4] = b"OCC1";
const HEADER_LEN: usize = 4 + 3 * 4 + 3 * 4 + 4;

/// Serializes a grid as OCC1: magic, u32 dims, f32 origin, f32 voxel size
/// (all little-endian), then one label byte per voxel in grid index order.
pub fn encode_occ(grid: &OccupancyGrid) -> Vec<u8> {
    let cfg = &grid.grid;
    let mut out = Vec::with_capacity(HEADER_LEN + cfg.num_voxels());
    out.extend_from_slice(OCC_MAGIC);
    for d in cfg.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for o in cfg.origin {
        out.extend_from_slice(&(o as f32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.voxel_size as f32).to_le_bytes());
    out.extend_from_slice(grid.labels());
    out
}

pub fn decode_occ(bytes: &[u8], path: &Path) -> Result<OccupancyGrid> {
    let bad = |reason: &str| Error::malformed(path, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != OCC_MAGIC {
        return Err(bad("missing OCC1 magic"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4-byte slice") };
    let dims: [usize; 3] = std::array::from_fn(|i| u32::from_le_bytes(word(i)) as usize);
    let origin = Vector3::from_fn(|i, _| f32::from_le_bytes(word(3 + i)) as f64);
    let voxel_size = f32::from_le_bytes(word(6)) as f64;
    let cfg = GridConfig::new(dims, origin, voxel_size).map_err(|e| bad(&e.to_string()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != cfg.num_voxels() {
        return Err(bad(&format!(
            "expected {} label bytes, found {}",
            cfg.num_voxels(),
            body.len()
        )));
    }
    OccupancyGrid::new(cfg, body.to_vec()).map_err(|e| bad(&e.to_string()))
}

pub fn write_occ(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    std::fs::write(path, encode_occ(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_occ(path: &Path) -> Result<OccupancyGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_occ(&bytes, path)
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1))))
        .collect()
}
