//! Run manifests and the CSV writer that stamps every output with the manifest hash.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gclrec::data::{IDMAP_FILE, TEST_FILE, TRAIN_FILE, VALID_FILE};
use gclrec::{Error, InteractionDataset, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct DatasetFingerprint {
    pub users: usize,
    pub items: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// SHA-256 over the split files and id map, in a fixed order.
    pub content_sha256: String,
}

impl DatasetFingerprint {
    /// Fingerprints a data directory written by `prepare`.
    pub fn of_dir(dir: &Path, dataset: &InteractionDataset) -> Result<Self> {
        let mut hasher = Sha256::new();
        for name in [TRAIN_FILE, VALID_FILE, TEST_FILE, IDMAP_FILE] {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hasher.update(name.as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        Ok(Self {
            users: dataset.num_users,
            items: dataset.num_items,
            train: dataset.train.len(),
            validation: dataset.validation.len(),
            test: dataset.test.len(),
            content_sha256: hex::encode(hasher.finalize()),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
    /// The effective configuration in `key = value` form, when the command has one.
    pub config: Option<String>,
    pub dataset: Option<DatasetFingerprint>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, deterministic: bool, threads: Option<usize>) -> Self {
        Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            deterministic,
            threads,
            config: None,
            dataset: None,
            outputs: Vec::new(),
        }
    }

    /// Writes the manifest as JSON and returns the SHA-256 of the written bytes.
    pub fn write(&self, path: &Path) -> Result<String> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize manifest: {e}")))?;
        bytes.push(b'\n');
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// A CSV file whose first line is `# manifest=<hash>`, followed by a header row.
pub struct CsvOut {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvOut {
    pub fn create(path: &Path, manifest_hash: &str, header: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path: path.to_owned(),
            w: BufWriter::new(file),
        };
        out.line(&format!("# manifest={manifest_hash}"))?;
        out.line(&header.join(","))?;
        Ok(out)
    }

    /// Opens an existing file for appending rows.
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            w: BufWriter::new(file),
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.w, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.line(&fields.join(","))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Formats an optional number, leaving the cell empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
