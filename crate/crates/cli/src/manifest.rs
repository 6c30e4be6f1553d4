use std::path::{Path, PathBuf};

use batchac::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: &'a str,
    config: &'a serde_json::Value,
    files: Vec<FileEntry>,
}

/// Collects the files of one command and writes `manifest.json` next to
/// them.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Outputs> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Registers a file written by someone else.
    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn finish<C: Serialize>(self, command: &str, seed: u64, config: &C, config_hash: &str) -> Result<PathBuf> {
        let mut files = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(f).map_err(|e| io_err(f, e))?;
            files.push(FileEntry {
                name: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let config = serde_json::to_value(config).map_err(|e| Error::Numerical(e.to_string()))?;
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash,
            config: &config,
            files,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Numerical(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
