//! Volume persistence: multi-page TIFF stacks, HDF5 datasets, and raw
//! little-endian binary with a JSON sidecar.
//!
//! Two bit depths are supported on disk (8-bit and float32); in memory
//! everything is f64. Voxel spacing is mandatory metadata: it either
//! travels with the file (sidecar or HDF5 attribute) or must be supplied
//! as an explicit override — there is never a silent default.

mod hdf5_io;
mod raw;
mod tiff_io;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{Spacing, Volume};

/// On-disk container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// Multi-page TIFF, one grayscale page per z-slice; spacing in a
    /// `<file>.json` sidecar.
    TiffStack,
    /// HDF5 file with the volume in a named dataset; spacing as a
    /// `spacing_nm` attribute on the dataset.
    Hdf5,
    /// Raw little-endian voxel data plus a `<file>.json` sidecar carrying
    /// `{shape, dtype, spacing_nm}`.
    RawJson,
}

impl VolumeFormat {
    /// Guesses the format from the file extension.
    pub fn infer(path: &Path) -> Option<VolumeFormat> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "tif" | "tiff" => Some(VolumeFormat::TiffStack),
            "h5" | "hdf5" => Some(VolumeFormat::Hdf5),
            "raw" => Some(VolumeFormat::RawJson),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VolumeFormat::TiffStack => "tiff-stack",
            VolumeFormat::Hdf5 => "hdf5",
            VolumeFormat::RawJson => "raw+json-sidecar",
        }
    }
}

impl std::str::FromStr for VolumeFormat {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiff" | "tiff-stack" | "tif" => Ok(VolumeFormat::TiffStack),
            "hdf5" | "h5" => Ok(VolumeFormat::Hdf5),
            "raw" | "raw+json-sidecar" => Ok(VolumeFormat::RawJson),
            other => Err(CoreError::config(format!(
                "unknown volume format '{other}' (expected tiff-stack, hdf5, or raw)"
            ))),
        }
    }
}

/// Sample type used on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitDepth {
    /// Unsigned 8-bit; values quantized from `[0,1]` by round(v*255).
    #[default]
    U8,
    /// IEEE float32, stored as-is.
    F32,
}

impl BitDepth {
    pub fn name(&self) -> &'static str {
        match self {
            BitDepth::U8 => "u8",
            BitDepth::F32 => "f32",
        }
    }
}

impl std::str::FromStr for BitDepth {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" | "8" => Ok(BitDepth::U8),
            "f32" | "float32" => Ok(BitDepth::F32),
            other => Err(CoreError::config(format!(
                "unknown bit depth '{other}' (expected u8 or f32)"
            ))),
        }
    }
}

/// Options for [`load_volume`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Spacing to use when the file carries none. Never overrides spacing
    /// that is present in the file.
    pub spacing_override: Option<Spacing>,
    /// HDF5 dataset path holding the voxels.
    pub h5_dataset: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            spacing_override: None,
            h5_dataset: DEFAULT_H5_DATASET.to_string(),
        }
    }
}

/// Options for [`save_volume`].
#[derive(Debug, Clone)]
pub struct SaveOptions {
    pub depth: BitDepth,
    pub h5_dataset: String,
}

impl Default for SaveOptions {
    fn default() -> Self {
        SaveOptions {
            depth: BitDepth::U8,
            h5_dataset: DEFAULT_H5_DATASET.to_string(),
        }
    }
}

pub const DEFAULT_H5_DATASET: &str = "volume";

/// Loads a volume. Voxels come back as stored (8-bit data is mapped to
/// `k/255`; floats are untouched) — intensity normalization is a separate,
/// explicit step. Spacing resolution order: file metadata, then
/// `opts.spacing_override`, then a hard error.
pub fn load_volume(path: &Path, format: VolumeFormat, opts: &LoadOptions) -> Result<Volume> {
    let (voxels, file_spacing) = match format {
        VolumeFormat::TiffStack => tiff_io::load(path)?,
        VolumeFormat::Hdf5 => hdf5_io::load(path, &opts.h5_dataset)?,
        VolumeFormat::RawJson => raw::load(path)?,
    };
    let spacing = match file_spacing.or(opts.spacing_override) {
        Some(s) => {
            s.validate()?;
            s
        }
        None => return Err(CoreError::MissingSpacing { path: path.into() }),
    };
    Volume::new(
        voxels,
        spacing,
        format!("loaded {} ({})", path.display(), format.name()),
    )
}

/// Saves a volume with its spacing metadata. Round-trips exactly at the
/// chosen bit depth: u8 data reloads bit-identically, f32 data reloads to
/// the same f32 values.
pub fn save_volume(v: &Volume, path: &Path, format: VolumeFormat, opts: &SaveOptions) -> Result<()> {
    match format {
        VolumeFormat::TiffStack => tiff_io::save(v, path, opts.depth),
        VolumeFormat::Hdf5 => hdf5_io::save(v, path, opts.depth, &opts.h5_dataset),
        VolumeFormat::RawJson => raw::save(v, path, opts.depth),
    }
}

/// Quantization used for all 8-bit output paths.
pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Path of the JSON sidecar accompanying `path` (`<file>.<ext>.json`).
pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}
