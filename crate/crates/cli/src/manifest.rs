//! Per-stage provenance manifests: config hash plus content hashes of every
//! input file, written as `<stage>_manifest.json` in the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use satscribe_core::text::content_hash;

use crate::config::PipelineConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
}

pub fn write_manifest(
    config: &PipelineConfig,
    stage: &str,
    inputs: &[PathBuf],
) -> anyhow::Result<()> {
    let mut hashed = BTreeMap::new();
    for path in inputs {
        let bytes = std::fs::read(path)?;
        hashed.insert(display_name(path), content_hash(&bytes));
    }
    let manifest = StageManifest {
        stage: stage.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: content_hash(config.canonical_json().as_bytes()),
        inputs: hashed,
    };
    let path = config.paths.out_dir.join(format!("{stage}_manifest.json"));
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// File name only: manifests must not embed absolute paths, or byte-identical
/// re-runs in different directories would diverge.
fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
