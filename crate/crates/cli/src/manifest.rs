//! Run manifest: one JSON file naming every artifact with its checksum.
//!
//! Only the orchestrating thread touches the manifest, and every file
//! (the manifest included) is written to a temporary sibling and renamed
//! into place, so an interrupted run never leaves a half-written artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    NotApplicable,
    Diverged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub kind: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Keyed by path relative to the output directory.
    pub entries: BTreeMap<String, Entry>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    /// Opens the manifest under `root`, creating an empty one if absent.
    /// An existing manifest written under a different config is an error.
    pub fn open(root: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        let path = root.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if m.config_hash != config_hash {
                bail!(
                    "{} was written by config {} but the current config hashes to {}; use a fresh output_dir",
                    path.display(),
                    m.config_hash,
                    config_hash
                );
            }
            m.root = root.to_path_buf();
            return Ok(m);
        }
        Ok(Self { config_hash: config_hash.to_string(), entries: BTreeMap::new(), root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` atomically and records it as `Ok`.
    pub fn write_artifact(&mut self, rel: &str, kind: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.entries.insert(
            rel.to_string(),
            Entry { kind: kind.to_string(), status: Status::Ok, sha256: Some(sha256_hex(bytes)), detail: None },
        );
        self.save()
    }

    /// Records an entry without an artifact behind it.
    pub fn record(&mut self, rel: &str, kind: &str, status: Status, detail: impl Into<String>) -> Result<()> {
        self.entries
            .insert(rel.to_string(), Entry { kind: kind.to_string(), status, sha256: None, detail: Some(detail.into()) });
        self.save()
    }

    /// True when `rel` is recorded `Ok` and the file on disk still matches
    /// its checksum.
    pub fn is_complete(&self, rel: &str) -> bool {
        let Some(Entry { status: Status::Ok, sha256: Some(expected), .. }) = self.entries.get(rel) else {
            return false;
        };
        fs::read(self.root.join(rel)).map(|b| &sha256_hex(&b) == expected).unwrap_or(false)
    }

    pub fn status(&self, rel: &str) -> Option<Status> {
        self.entries.get(rel).map(|e| e.status)
    }

    fn save(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&self.root.join(MANIFEST_FILE), &json)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("artifact path has no parent directory")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("artifact path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
