//! Checkpoint directories.
//!
//! A checkpoint is a directory holding a plain-text `manifest.json` (method
//! kind, schema, configs, seed, code version, validation metrics, blob
//! digests) plus one binary f64 blob per parameter group. The manifest is
//! readable without touching the blobs; blob loads verify length and digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::{DatasetSchema, ModelConfig};
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"MVSPARAM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Method kind: "ours", "ours_no_cvmi", "mvae", "deepimv_style", "base".
    pub kind: String,
    pub schema: DatasetSchema,
    pub model_config: Option<ModelConfig>,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub code_version: String,
    pub val_metrics: Option<MetricsReport>,
    /// Blob name -> (parameter count, sha256 of the file).
    pub blobs: BTreeMap<String, (usize, String)>,
    /// Method-specific structured extras (e.g. per-view classifier layout).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn blob_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a checkpoint directory with the given parameter blobs.
pub fn save_checkpoint(
    dir: &Path,
    mut manifest: CheckpointManifest,
    blobs: &[(&str, &[f64])],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    manifest.blobs.clear();
    for (name, values) in blobs {
        let bytes = blob_bytes(values);
        fs::write(dir.join(format!("{name}.bin")), &bytes)?;
        manifest
            .blobs
            .insert(name.to_string(), (values.len(), sha256_hex(&bytes)));
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), format!("{json}\n"))?;
    Ok(())
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(dir.join("manifest.json")).map_err(|e| {
        Error::malformed(format!("missing checkpoint manifest in {}: {e}", dir.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load one named blob, verifying magic, length, and digest.
pub fn load_blob(dir: &Path, manifest: &CheckpointManifest, name: &str) -> Result<Vec<f64>> {
    let (expected_len, expected_digest) = manifest
        .blobs
        .get(name)
        .ok_or_else(|| Error::malformed(format!("blob '{name}' not in manifest")))?;
    let rel = format!("{name}.bin");
    let bytes = fs::read(dir.join(&rel))
        .map_err(|e| Error::malformed(format!("missing blob {rel}: {e}")))?;
    let actual = sha256_hex(&bytes);
    if &actual != expected_digest {
        return Err(Error::ChecksumMismatch {
            path: rel,
            expected: expected_digest.clone(),
            actual,
        });
    }
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::malformed(format!("{rel}: bad magic")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::malformed(format!("{rel}: unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if count != *expected_len || bytes.len() != 16 + count * 8 {
        return Err(Error::malformed(format!("{rel}: length mismatch")));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + i * 8;
        values.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    Ok(values)
}
