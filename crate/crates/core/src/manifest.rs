//! Run manifests: what a command produced, from which config, with content
//! hashes so later edits to any artifact are detectable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub role: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock durations. Informational; never part of any hashed output.
    pub timings: Vec<Timing>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            config_hash,
            seeds,
            artifacts: Vec::new(),
            timings: Vec::new(),
        }
    }

    /// Records `path` (which must exist) relative to `root`.
    pub fn add_artifact(&mut self, root: &Path, role: &str, path: &Path) -> Result<()> {
        let sha256 = fsutil::sha256_file(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        self.artifacts.push(Artifact {
            role: role.to_owned(),
            path: rel,
            sha256,
        });
        Ok(())
    }

    pub fn add_timing(&mut self, stage: &str, seconds: f64) {
        self.timings.push(Timing {
            stage: stage.to_owned(),
            seconds,
        });
    }

    /// Writes the manifest to `path` after checking every artifact, resolved
    /// against the manifest's directory, still matches its recorded hash.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = parent_dir(path);
        if let Some(p) = self.check(dir).first() {
            return Err(Error::format(path, format!("manifest artifact check failed: {p}")));
        }
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fsutil::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fsutil::read(path)?)
            .map_err(|e| Error::format(path, format!("bad manifest: {e}")))
    }

    /// Missing or modified artifacts, one message each.
    pub fn check(&self, dir: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            match fsutil::sha256_file(&p) {
                Ok(h) if h == a.sha256 => {}
                Ok(_) => problems.push(format!("{} modified", a.path.display())),
                Err(_) => problems.push(format!("{} missing", a.path.display())),
            }
        }
        problems
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Loads the manifest at `path` and re-hashes every artifact.
pub fn verify(path: &Path) -> Result<Vec<String>> {
    Ok(RunManifest::load(path)?.check(parent_dir(path)))
}
