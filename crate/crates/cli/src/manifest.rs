//! Append-only record of the artifacts produced in a workspace.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use latent_update::io::{file_digest, read_json};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "manifest.lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub kind: String,
    pub path: PathBuf,
    pub digest: String,
}

impl Artifact {
    pub fn of(kind: &str, path: &Path) -> CliResult<Self> {
        Ok(Self {
            kind: kind.to_owned(),
            path: path.to_path_buf(),
            digest: file_digest(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub command: String,
    /// Full argument vector; rerunning it reproduces the outputs.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Effective configuration, echoed for reference.
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub created_unix_ms: u128,
    pub tool_version: String,
}

impl ManifestEntry {
    pub fn new(
        command: &str,
        argv: &[String],
        seed: Option<u64>,
        config: serde_json::Value,
    ) -> Self {
        Self {
            command: command.to_owned(),
            argv: argv.to_vec(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Result of re-hashing one recorded artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactCheck {
    pub path: PathBuf,
    pub recorded: String,
    /// `None` when the file is missing.
    pub actual: Option<String>,
    pub ok: bool,
}

impl WorkspaceManifest {
    pub fn path(workspace: &Path) -> PathBuf {
        workspace.join(MANIFEST_FILE)
    }

    pub fn load(workspace: &Path) -> CliResult<Self> {
        let path = Self::path(workspace);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(read_json(&path)?)
    }

    /// Re-hashes every output ever recorded.
    pub fn verify(&self) -> Vec<ArtifactCheck> {
        self.entries
            .iter()
            .flat_map(|e| &e.outputs)
            .map(|a| {
                let actual = file_digest(&a.path).ok();
                ArtifactCheck {
                    path: a.path.clone(),
                    recorded: a.digest.clone(),
                    ok: actual.as_deref() == Some(a.digest.as_str()),
                    actual,
                }
            })
            .collect()
    }

    /// Appends one entry under the workspace lock, replacing the manifest
    /// file by an atomic rename. Earlier entries are never modified.
    pub fn append(workspace: &Path, entry: ManifestEntry) -> CliResult<()> {
        fs::create_dir_all(workspace)?;
        let _lock = Lock::acquire(workspace)?;
        let mut manifest = Self::load(workspace)?;
        manifest.entries.push(entry);
        let tmp = workspace.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, &manifest).map_err(latent_update::Error::from)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, Self::path(workspace))?;
        Ok(())
    }
}

struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(workspace: &Path) -> CliResult<Self> {
        let path = workspace.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
