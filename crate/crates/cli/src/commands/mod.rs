//! Subcommand implementations and the file-handling glue they share.

pub mod evaluate;
pub mod phantom;
pub mod reconstruct;
pub mod synthesize;
pub mod train;

use std::path::{Path, PathBuf};

use isosr_core::io::{load_volume, save_volume, LoadOptions, SaveOptions, VolumeFormat};
use isosr_core::{CoreError, Result, Spacing, Volume};

use crate::config::IoSection;

/// Resolves a path from a flag with the config's `io` section as
/// fallback.
pub fn resolve_path(
    flag: &Option<PathBuf>,
    section: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf> {
    flag.clone().or_else(|| section.clone()).ok_or_else(|| {
        CoreError::config(format!(
            "no {what} given: pass --{what} or set io.{what} in the config file"
        ))
    })
}

fn format_for(path: &Path) -> Result<VolumeFormat> {
    VolumeFormat::infer(path).ok_or_else(|| {
        CoreError::config(format!(
            "cannot infer volume format from '{}' (expected .tif/.tiff, .h5/.hdf5, or .raw)",
            path.display()
        ))
    })
}

pub fn load_input_volume(path: &Path, io: &IoSection) -> Result<Volume> {
    let opts = LoadOptions {
        spacing_override: io.spacing_nm.map(Spacing::from_array).transpose()?,
        h5_dataset: io.h5_dataset.clone(),
    };
    load_volume(path, format_for(path)?, &opts)
}

pub fn save_output_volume(v: &Volume, path: &Path, io: &IoSection) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let opts = SaveOptions {
        depth: io.depth,
        h5_dataset: io.h5_dataset.clone(),
    };
    save_volume(v, path, format_for(path)?, &opts)
}

/// Parses `N` or `Z,Y,X` into a shape triple.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad size component '{p}': {e}"))
    };
    match parts.as_slice() {
        [n] => {
            let n = parse(n)?;
            Ok((n, n, n))
        }
        [z, y, x] => Ok((parse(z)?, parse(y)?, parse(x)?)),
        _ => Err("expected one integer or Z,Y,X".to_string()),
    }
}

/// Parses `S` or `Z,Y,X` spacing in nanometres.
pub fn parse_spacing(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| {
        p.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad spacing component '{p}': {e}"))
    };
    match parts.as_slice() {
        [v] => {
            let v = parse(v)?;
            Ok([v, v, v])
        }
        [z, y, x] => Ok([parse(z)?, parse(y)?, parse(x)?]),
        _ => Err("expected one number or Z,Y,X".to_string()),
    }
}
