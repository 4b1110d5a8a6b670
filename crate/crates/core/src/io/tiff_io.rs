//! Multi-page TIFF backend. One grayscale page per z-slice; spacing rides
//! in a JSON sidecar next to the stack.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use super::{quantize_u8, sidecar_path, BitDepth};
use crate::error::{CoreError, Result};
use crate::volume::{Spacing, Volume};

#[derive(Serialize, Deserialize)]
struct TiffSidecar {
    spacing_nm: [f64; 3],
}

pub(super) fn load(path: &Path) -> Result<(Array3<f64>, Option<Spacing>)> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| CoreError::format(path, format!("not a readable TIFF: {e}")))?;

    let mut slices: Vec<Vec<f64>> = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    loop {
        let (w, h) = dec
            .dimensions()
            .map_err(|e| CoreError::format(path, format!("bad page header: {e}")))?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(CoreError::format(
                    path,
                    format!("mismatched slice sizes: {:?} then {:?}", d, (w, h)),
                ))
            }
            _ => {}
        }
        let img = dec
            .read_image()
            .map_err(|e| CoreError::format(path, format!("truncated or corrupt page: {e}")))?;
        let data: Vec<f64> = match img {
            DecodingResult::U8(buf) => buf.iter().map(|&v| v as f64 / 255.0).collect(),
            DecodingResult::F32(buf) => buf.iter().map(|&v| v as f64).collect(),
            _ => {
                return Err(CoreError::format(
                    path,
                    "unsupported TIFF sample format (expected 8-bit or float32 grayscale)",
                ))
            }
        };
        if data.len() != (w as usize) * (h as usize) {
            return Err(CoreError::format(path, "page data shorter than header claims"));
        }
        slices.push(data);
        if !dec.more_images() {
            break;
        }
        dec.next_image()
            .map_err(|e| CoreError::format(path, format!("broken page chain: {e}")))?;
    }

    let (w, h) = dims.expect("at least one page");
    let z = slices.len();
    let flat: Vec<f64> = slices.into_iter().flatten().collect();
    let voxels = Array3::from_shape_vec((z, h as usize, w as usize), flat)
        .expect("shape consistent by construction");

    let spacing = read_sidecar(path)?;
    Ok((voxels, spacing))
}

fn read_sidecar(path: &Path) -> Result<Option<Spacing>> {
    let sc = sidecar_path(path);
    if !sc.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&sc).map_err(|e| CoreError::io(&sc, e))?;
    let parsed: TiffSidecar = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(&sc, format!("invalid sidecar JSON: {e}")))?;
    Ok(Some(Spacing::from_array(parsed.spacing_nm)?))
}

pub(super) fn save(v: &Volume, path: &Path, depth: BitDepth) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file))
        .map_err(|e| CoreError::format(path, format!("cannot start TIFF: {e}")))?;

    let (nz, ny, nx) = v.shape();
    for z in 0..nz {
        let plane = v.voxels.index_axis(ndarray::Axis(0), z);
        match depth {
            BitDepth::U8 => {
                let data: Vec<u8> = plane.iter().map(|&x| quantize_u8(x)).collect();
                enc.write_image::<colortype::Gray8>(nx as u32, ny as u32, &data)
                    .map_err(|e| CoreError::format(path, format!("write failed at slice {z}: {e}")))?;
            }
            BitDepth::F32 => {
                let data: Vec<f32> = plane.iter().map(|&x| x as f32).collect();
                enc.write_image::<colortype::Gray32Float>(nx as u32, ny as u32, &data)
                    .map_err(|e| CoreError::format(path, format!("write failed at slice {z}: {e}")))?;
            }
        }
    }

    let sidecar = TiffSidecar {
        spacing_nm: v.spacing.as_array(),
    };
    let sc = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sc, text).map_err(|e| CoreError::io(&sc, e))?;
    Ok(())
}
