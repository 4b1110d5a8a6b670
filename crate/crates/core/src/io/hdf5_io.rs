//! HDF5 backend. The volume lives in a named dataset; spacing is stored
//! as a `spacing_nm` attribute (f64, length 3, z/y/x order) on it.

use std::path::Path;

use hdf5::types::TypeDescriptor;
use ndarray::Array3;

use super::{quantize_u8, BitDepth};
use crate::error::{CoreError, Result};
use crate::volume::{Spacing, Volume};

const SPACING_ATTR: &str = "spacing_nm";

fn h5err(path: &Path, what: &str, e: hdf5::Error) -> CoreError {
    CoreError::format(path, format!("{what}: {e}"))
}

pub(super) fn load(path: &Path, dataset: &str) -> Result<(Array3<f64>, Option<Spacing>)> {
    if !path.exists() {
        return Err(CoreError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let file = hdf5::File::open(path).map_err(|e| h5err(path, "cannot open HDF5", e))?;
    let ds = file
        .dataset(dataset)
        .map_err(|e| h5err(path, &format!("no dataset '{dataset}'"), e))?;

    let shape = ds.shape();
    if shape.len() != 3 {
        return Err(CoreError::format(
            path,
            format!("dataset '{dataset}' is {}-d, expected 3-d (z,y,x)", shape.len()),
        ));
    }
    let (z, y, x) = (shape[0], shape[1], shape[2]);

    let descriptor = ds
        .dtype()
        .and_then(|d| d.to_descriptor())
        .map_err(|e| h5err(path, "unreadable datatype", e))?;
    let flat: Vec<f64> = match descriptor {
        TypeDescriptor::Unsigned(hdf5::types::IntSize::U1) => ds
            .read_raw::<u8>()
            .map_err(|e| h5err(path, "read failed", e))?
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        TypeDescriptor::Float(hdf5::types::FloatSize::U4) => ds
            .read_raw::<f32>()
            .map_err(|e| h5err(path, "read failed", e))?
            .into_iter()
            .map(|v| v as f64)
            .collect(),
        TypeDescriptor::Float(hdf5::types::FloatSize::U8) => ds
            .read_raw::<f64>()
            .map_err(|e| h5err(path, "read failed", e))?,
        other => {
            return Err(CoreError::format(
                path,
                format!("unsupported dataset type {other} (expected u8, f32, or f64)"),
            ))
        }
    };
    let voxels = Array3::from_shape_vec((z, y, x), flat)
        .map_err(|_| CoreError::format(path, "dataset size does not match its shape"))?;

    let spacing = match ds.attr(SPACING_ATTR) {
        Ok(attr) => {
            let vals = attr
                .read_raw::<f64>()
                .map_err(|e| h5err(path, "unreadable spacing attribute", e))?;
            if vals.len() != 3 {
                return Err(CoreError::format(
                    path,
                    format!("spacing attribute has {} entries, expected 3", vals.len()),
                ));
            }
            Some(Spacing::from_array([vals[0], vals[1], vals[2]])?)
        }
        Err(_) => None,
    };
    Ok((voxels, spacing))
}

pub(super) fn save(v: &Volume, path: &Path, depth: BitDepth, dataset: &str) -> Result<()> {
    let file = hdf5::File::create(path).map_err(|e| h5err(path, "cannot create HDF5", e))?;
    let (z, y, x) = v.shape();

    let ds = match depth {
        BitDepth::U8 => {
            let ds = file
                .new_dataset::<u8>()
                .shape([z, y, x])
                .create(dataset)
                .map_err(|e| h5err(path, "cannot create dataset", e))?;
            let data: Vec<u8> = v.voxels.iter().map(|&x| quantize_u8(x)).collect();
            ds.write_raw(&data)
                .map_err(|e| h5err(path, "write failed", e))?;
            ds
        }
        BitDepth::F32 => {
            let ds = file
                .new_dataset::<f32>()
                .shape([z, y, x])
                .create(dataset)
                .map_err(|e| h5err(path, "cannot create dataset", e))?;
            let data: Vec<f32> = v.voxels.iter().map(|&x| x as f32).collect();
            ds.write_raw(&data)
                .map_err(|e| h5err(path, "write failed", e))?;
            ds
        }
    };

    let attr = ds
        .new_attr::<f64>()
        .shape([3])
        .create(SPACING_ATTR)
        .map_err(|e| h5err(path, "cannot create spacing attribute", e))?;
    attr.write_raw(&v.spacing.as_array())
        .map_err(|e| h5err(path, "spacing write failed", e))?;
    Ok(())
}
