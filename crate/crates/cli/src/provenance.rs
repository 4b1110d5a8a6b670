//! Provenance sidecars: every artifact records the resolved config, the
//! command-specific parameters, and content hashes of its inputs — enough
//! to reproduce the artifact exactly. No timestamps, so repeated runs
//! with the same inputs produce byte-identical records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use isosr_core::checkpoint::file_sha256;
use isosr_core::{CoreError, Result};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

impl FileStamp {
    pub fn of(path: &Path) -> Result<FileStamp> {
        Ok(FileStamp {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Provenance<'a> {
    /// Subcommand that produced the artifact.
    pub command: &'static str,
    /// Command-specific resolved parameters (sizes, seeds, counts).
    pub parameters: serde_json::Value,
    /// The fully resolved run configuration.
    pub config: &'a RunConfig,
    /// Content hashes of the inputs the artifact derives from.
    pub inputs: BTreeMap<&'static str, FileStamp>,
}

/// Sidecar location: `<artifact>.provenance.json` next to file artifacts,
/// `provenance.json` inside directory artifacts.
pub fn provenance_path(artifact: &Path, artifact_is_dir: bool) -> PathBuf {
    if artifact_is_dir {
        artifact.join("provenance.json")
    } else {
        let mut name = artifact
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".provenance.json");
        artifact.with_file_name(name)
    }
}

pub fn write_provenance(
    artifact: &Path,
    artifact_is_dir: bool,
    prov: &Provenance<'_>,
) -> Result<PathBuf> {
    let path = provenance_path(artifact, artifact_is_dir);
    let mut json =
        serde_json::to_string_pretty(prov).expect("provenance records always serialize");
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}
