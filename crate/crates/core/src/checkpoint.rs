//! Self-contained binary checkpoint format.
//!
//! Layout: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header, then the raw array data as little-endian f64. The header
//! carries the model and loss configuration, the training position, a
//! SHA-256 of the data section, and a manifest locating every array by
//! name. Everything needed to resume bit-exactly — parameters, optimizer
//! moments, projection directions, step and seed — lives in one file, and
//! saving the same state twice produces byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ISOSRCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Number of completed optimization steps.
    pub step: u64,
    /// Master training seed; together with `step` it pins the data
    /// stream and augmentation draws of a resumed run.
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    data_sha256: String,
    arrays: Vec<ArrayEntry>,
}

/// Full training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    /// Adam first moments, aligned with `params` by name.
    pub adam_m: ParamSet,
    /// Adam second moments, aligned with `params` by name.
    pub adam_v: ParamSet,
    /// Projection directions of the distribution loss, `[R, p^2]`.
    pub directions: Array2<f64>,
}

fn push_set(order: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, set: &ParamSet) {
    for (name, arr) in set.iter() {
        order.push((
            format!("{prefix}.{name}"),
            arr.shape().to_vec(),
            arr.iter().cloned().collect(),
        ));
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    push_set(&mut arrays, "param", &ckpt.params);
    push_set(&mut arrays, "adam_m", &ckpt.adam_m);
    push_set(&mut arrays, "adam_v", &ckpt.adam_v);
    arrays.push((
        "loss.directions".to_string(),
        ckpt.directions.shape().to_vec(),
        ckpt.directions.iter().cloned().collect(),
    ));

    let mut data = Vec::with_capacity(arrays.iter().map(|(_, _, v)| v.len() * 8).sum());
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, shape, values) in &arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len() as u64,
        });
        offset += values.len() as u64;
        for &v in values {
            data.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }

    let header = Header {
        meta: ckpt.meta.clone(),
        data_sha256: hex_digest(&data),
        arrays: entries,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = std::io::BufWriter::new(&mut file);
    out.write_all(CHECKPOINT_MAGIC).map_err(|e| CoreError::io(path, e))?;
    out.write_u64::<LittleEndian>(header_json.len() as u64)
        .map_err(|e| CoreError::io(path, e))?;
    out.write_all(&header_json).map_err(|e| CoreError::io(path, e))?;
    out.write_all(&data).map_err(|e| CoreError::io(path, e))?;
    out.flush().map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?,
    );
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::format(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = file
        .read_u64::<LittleEndian>()
        .map_err(|e| CoreError::io(path, e))? as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(|e| CoreError::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CoreError::format(path, format!("invalid checkpoint header: {e}")))?;
    if header.meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CoreError::format(
            path,
            format!(
                "unsupported checkpoint format version {}",
                header.meta.format_version
            ),
        ));
    }

    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| CoreError::io(path, e))?;
    if hex_digest(&data) != header.data_sha256 {
        return Err(CoreError::format(path, "checkpoint data does not match its digest"));
    }

    let read_array = |entry: &ArrayEntry| -> Result<isosr_autograd::Arr> {
        let start = (entry.offset as usize) * 8;
        let end = start + (entry.len as usize) * 8;
        if end > data.len() {
            return Err(CoreError::format(
                path,
                format!("array {} extends past the data section", entry.name),
            ));
        }
        let mut values = vec![0f64; entry.len as usize];
        (&data[start..end])
            .read_f64_into::<LittleEndian>(&mut values)
            .map_err(|e| CoreError::io(path, e))?;
        isosr_autograd::Arr::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
            .map_err(|e| CoreError::format(path, format!("array {}: {e}", entry.name)))
    };

    let mut params = ParamSet::new();
    let mut adam_m = ParamSet::new();
    let mut adam_v = ParamSet::new();
    let mut directions: Option<Array2<f64>> = None;
    for entry in &header.arrays {
        let arr = read_array(entry)?;
        if let Some(name) = entry.name.strip_prefix("param.") {
            params.insert(name, arr);
        } else if let Some(name) = entry.name.strip_prefix("adam_m.") {
            adam_m.insert(name, arr);
        } else if let Some(name) = entry.name.strip_prefix("adam_v.") {
            adam_v.insert(name, arr);
        } else if entry.name == "loss.directions" {
            directions = Some(
                arr.into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| CoreError::format(path, format!("directions: {e}")))?,
            );
        } else {
            return Err(CoreError::format(
                path,
                format!("unknown array {} in checkpoint", entry.name),
            ));
        }
    }
    let directions =
        directions.ok_or_else(|| CoreError::format(path, "checkpoint lacks loss directions"))?;

    let ckpt = Checkpoint {
        meta: header.meta,
        params,
        adam_m,
        adam_v,
        directions,
    };
    validate_checkpoint(&ckpt, path)?;
    Ok(ckpt)
}

fn validate_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.meta.model.validate()?;
    ckpt.meta.loss.validate()?;
    if ckpt.params.scalar_count() != ckpt.meta.model.param_count() {
        return Err(CoreError::format(
            path,
            format!(
                "parameter count {} does not match the declared architecture ({})",
                ckpt.params.scalar_count(),
                ckpt.meta.model.param_count()
            ),
        ));
    }
    for set in [&ckpt.adam_m, &ckpt.adam_v] {
        if set.len() != ckpt.params.len() {
            return Err(CoreError::format(path, "optimizer state does not cover all parameters"));
        }
        for (name, arr) in set.iter() {
            if !ckpt.params.contains(name) || ckpt.params.get(name).shape() != arr.shape() {
                return Err(CoreError::format(
                    path,
                    format!("optimizer moment {name} does not match any parameter"),
                ));
            }
        }
    }
    let p2 = ckpt.meta.loss.pdl_patch * ckpt.meta.loss.pdl_patch;
    if ckpt.directions.dim() != (ckpt.meta.loss.pdl_directions, p2) {
        return Err(CoreError::format(
            path,
            "projection directions do not match the loss configuration",
        ));
    }
    Ok(())
}

/// Hex SHA-256 of a whole file, for provenance records.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(hex_digest(&bytes))
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
