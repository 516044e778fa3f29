use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command run: its inputs, outputs and config.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn artifacts(paths: &[PathBuf]) -> Result<Vec<Artifact>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(Artifact {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub struct ManifestBuilder {
    command: &'static str,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
        }
    }

    pub fn write(
        self,
        path: &Path,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            inputs: artifacts(inputs)?,
            outputs: artifacts(outputs)?,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
