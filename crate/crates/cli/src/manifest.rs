use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Command;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::files;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to regenerate a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub tokenizer_version: u32,
    pub model_format_version: u32,
    pub command: Command,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: Command, config: RunConfig, out_dir: &Path, outputs: &[PathBuf]) -> CliResult<Self> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    path: p.strip_prefix(out_dir).unwrap_or(p).to_path_buf(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            tokenizer_version: ast_core::text::TOKENIZER_VERSION,
            model_format_version: ast_core::siamese::MODEL_FORMAT_VERSION,
            command,
            seed: config.seed,
            config_sha256: config.hash(),
            config,
            outputs,
        })
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        files::write_json(&path, self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))?;
        if m.config.hash() != m.config_sha256 {
            return Err(CliError::Usage(format!("manifest {}: config hash mismatch", path.display())));
        }
        Ok(m)
    }
}
