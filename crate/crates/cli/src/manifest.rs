//! Provenance record embedded in (or written next to) every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError, CliResult};

/// File name of the record inside a model output directory.
pub const DIR_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every flag except the thread budget and the output location.
    pub args: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Accept either a manifest file or the directory holding `manifest.json`.
pub fn model_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

impl RunManifest {
    pub fn new<A: Serialize>(command: &str, args: &A, seed: Option<u64>) -> CliResult<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: serde_json::to_value(args)?,
            seed,
            inputs: Vec::new(),
        })
    }

    pub fn add_file(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Digest the model manifest and every tensor file it references.
    pub fn add_model(&mut self, path: &Path) -> CliResult<()> {
        let manifest = model_manifest_path(path);
        self.add_file("model", &manifest)?;
        let text = fs::read_to_string(&manifest).map_err(|e| io_error(&manifest, e))?;
        let json: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", manifest.display())))?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let layers = json["layers"].as_array().cloned().unwrap_or_default();
        for layer in &layers {
            for key in ["weight_file", "bias_file"] {
                if let Some(f) = layer[key].as_str() {
                    self.add_file(&format!("model/{f}"), &dir.join(f))?;
                }
            }
        }
        Ok(())
    }

    /// Check that every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for input in &self.inputs {
            let now = sha256_file(Path::new(&input.path))?;
            if now != input.sha256 {
                return Err(CliError::Validation(format!(
                    "{} ({}) changed since the run: sha256 {} != recorded {}",
                    input.path, input.role, now, input.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Sidecar location for artifacts whose format has no room for a manifest.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Find the manifest recorded for `artifact`: inside a model directory, as
/// a top-level `manifest` key of a JSON object, or in a sidecar file.
pub fn locate(artifact: &Path) -> CliResult<RunManifest> {
    let from_file = |p: &Path| -> CliResult<RunManifest> {
        let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
    };
    if artifact.is_dir() {
        return from_file(&artifact.join(DIR_MANIFEST));
    }
    let sidecar = sidecar_path(artifact);
    if sidecar.exists() {
        return from_file(&sidecar);
    }
    let text = fs::read_to_string(artifact).map_err(|e| io_error(artifact, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|_| {
        CliError::Validation(format!("{}: no run manifest found", artifact.display()))
    })?;
    match value.get("manifest") {
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| {
            CliError::Validation(format!("{}: bad run manifest: {e}", artifact.display()))
        }),
        None => Err(CliError::Validation(format!(
            "{}: no run manifest found",
            artifact.display()
        ))),
    }
}
