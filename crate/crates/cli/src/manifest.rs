//! Run manifests. Each verb writes one: the config snapshot, the seeds in
//! play, and content hashes of every input and output, so any artifact can
//! be checked against (or regenerated from) its manifest. Manifests carry
//! no timestamps; two runs of the same verb on the same inputs produce
//! byte-identical manifests.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative path: inputs as written in the config, outputs relative to
    /// the run directory. No absolute paths, so manifests compare across
    /// machines and run directories.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub verb: String,
    pub root_seed: u64,
    pub config_sha256: String,
    pub config_text: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Scalar run metrics, ordered by name.
    pub metrics: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(verb: &str, root_seed: u64, config_text: &str) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            verb: verb.to_string(),
            root_seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            config_text: config_text.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord {
            path: label.to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Records an output by its path relative to the run directory.
    pub fn add_output(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.outputs.push(FileRecord {
            path: rel,
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Records every regular file under a directory output, sorted by path.
    pub fn add_output_dir(&mut self, out_dir: &Path, dir: &Path) -> Result<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            self.add_output(out_dir, &f)?;
        }
        Ok(())
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn path_for(out_dir: &Path, verb: &str) -> PathBuf {
        out_dir.join(format!("manifest-{verb}.toml"))
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = Self::path_for(out_dir, &self.verb);
        let text = toml::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
