use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TIMINGS_FILE: &str = "timings.toml";

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
}

/// Everything needed to rerun a command bit-exactly. Wall-clock data goes to
/// a separate timings file so that the manifest itself is reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub overrides: Overrides,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub command: String,
    pub wall_seconds: f64,
    pub threads: usize,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_toml(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text =
        toml::to_string(value).map_err(|e| CliError::Usage(format!("cannot serialise {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}
