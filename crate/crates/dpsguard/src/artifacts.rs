//! Writes an artifact tree and its manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, Result};
use crate::formats::json_bytes;
use crate::spec::hex_digest;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_digest: String,
    /// Relative path → SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

/// Collects files under `root`, recording the digest of each.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Self {
            root,
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `relative` (forward slashes) under the root.
    pub fn write(&mut self, relative: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(relative.to_string(), hex_digest(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, relative: &str, value: &T) -> Result<PathBuf> {
        self.write(relative, &json_bytes(value))
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(self, command: &str, config_digest: &str) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            config_digest: config_digest.to_string(),
            files: self.files,
        };
        let path = self.root.join("manifest.json");
        std::fs::write(&path, json_bytes(&manifest)).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
