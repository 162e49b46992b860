//! Run manifests: what went in, what came out, and under which settings.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub checkpoints: Vec<String>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    /// Digests the inputs immediately, before the command touches anything.
    pub fn begin(command: &'static str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Result<Self, CliError> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            inputs,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Digests the outputs (named relative to `out_dir`) and writes the
    /// manifest atomically as `<command>.manifest.json`.
    pub fn finish(mut self, out_dir: &Path, outputs: &[&str]) -> Result<PathBuf, CliError> {
        for name in outputs {
            self.outputs.push(FileDigest {
                path: (*name).to_owned(),
                sha256: sha256_file(&out_dir.join(name))?,
            });
        }
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        sparseprior_core::io::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
