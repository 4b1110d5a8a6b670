//! Raw little-endian backend: bare voxel data in one file, geometry and
//! spacing in a `<file>.json` sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{quantize_u8, sidecar_path, BitDepth};
use crate::error::{CoreError, Result};
use crate::volume::{Spacing, Volume};

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    /// (z, y, x) extents.
    shape: [usize; 3],
    /// "u8" or "f32".
    dtype: String,
    /// May be absent in externally produced sidecars; then an override is
    /// required at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing_nm: Option<[f64; 3]>,
}

pub(super) fn load(path: &Path) -> Result<(Array3<f64>, Option<Spacing>)> {
    let sc = sidecar_path(path);
    let text = std::fs::read_to_string(&sc).map_err(|e| CoreError::io(&sc, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(&sc, format!("invalid sidecar JSON: {e}")))?;

    let [z, y, x] = sidecar.shape;
    let n = z
        .checked_mul(y)
        .and_then(|v| v.checked_mul(x))
        .ok_or_else(|| CoreError::format(&sc, "shape overflows"))?;

    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let flat: Vec<f64> = match sidecar.dtype.as_str() {
        "u8" => {
            let mut buf = vec![0u8; n];
            reader
                .read_exact(&mut buf)
                .map_err(|e| CoreError::format(path, format!("truncated voxel data: {e}")))?;
            buf.into_iter().map(|v| v as f64 / 255.0).collect()
        }
        "f32" => {
            let mut buf = vec![0f32; n];
            reader
                .read_f32_into::<LittleEndian>(&mut buf)
                .map_err(|e| CoreError::format(path, format!("truncated voxel data: {e}")))?;
            buf.into_iter().map(|v| v as f64).collect()
        }
        other => {
            return Err(CoreError::format(
                &sc,
                format!("unsupported dtype '{other}' (expected u8 or f32)"),
            ))
        }
    };

    let voxels = Array3::from_shape_vec((z, y, x), flat).expect("length checked above");
    let spacing = match sidecar.spacing_nm {
        Some(a) => Some(Spacing::from_array(a)?),
        None => None,
    };
    Ok((voxels, spacing))
}

pub(super) fn save(v: &Volume, path: &Path, depth: BitDepth) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match depth {
        BitDepth::U8 => {
            let data: Vec<u8> = v.voxels.iter().map(|&x| quantize_u8(x)).collect();
            writer
                .write_all(&data)
                .map_err(|e| CoreError::io(path, e))?;
        }
        BitDepth::F32 => {
            for &x in v.voxels.iter() {
                writer
                    .write_f32::<LittleEndian>(x as f32)
                    .map_err(|e| CoreError::io(path, e))?;
            }
        }
    }
    writer.flush().map_err(|e| CoreError::io(path, e))?;

    let (z, y, x) = v.shape();
    let sidecar = RawSidecar {
        shape: [z, y, x],
        dtype: depth.name().to_string(),
        spacing_nm: Some(v.spacing.as_array()),
    };
    let sc = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sc, text).map_err(|e| CoreError::io(&sc, e))?;
    Ok(())
}
