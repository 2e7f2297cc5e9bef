//! Artifact directories: the writer lock, input checks and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use oculus::checkpoint::{file_sha256, sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const LOCK_FILE: &str = ".oculus.lock";

/// Holds the directory lock until dropped.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                dir: dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// File name to SHA-256 of every artifact read.
    pub inputs: BTreeMap<String, String>,
    /// File name to SHA-256 of every artifact written.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

/// One command's view of the artifact directory.
#[derive(Debug)]
pub struct Session {
    dir: PathBuf,
    command: &'static str,
    config: RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    start: Instant,
    _lock: DirLock,
}

impl Session {
    pub fn open(dir: &Path, command: &'static str, config: &RunConfig) -> Result<Self, CliError> {
        let lock = DirLock::acquire(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            start: Instant::now(),
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Checks that every upstream artifact exists before any work starts
    /// and records its hash.
    pub fn require(&mut self, inputs: &[(&str, &'static str)]) -> Result<(), CliError> {
        for (name, producer) in inputs {
            let path = self.path(name);
            if !path.is_file() {
                return Err(CliError::MissingArtifact { path, producer });
            }
        }
        for (name, _) in inputs {
            let hash = file_sha256(&self.path(name))?;
            self.inputs.insert((*name).to_string(), hash);
        }
        Ok(())
    }

    pub fn input_hash(&self, name: &str) -> Option<&str> {
        self.inputs.get(name).map(String::as_str)
    }

    pub fn read_string(&self, name: &str) -> Result<String, CliError> {
        Ok(fs::read_to_string(self.path(name))?)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file that was written by other means.
    pub fn record_output(&mut self, name: &str) -> Result<(), CliError> {
        let hash = file_sha256(&self.path(name))?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest, CliError> {
        let manifest = Manifest {
            command: self.command.to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.path(&manifest_name(self.command)), text.as_bytes())?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path, command: &str) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(dir.join(manifest_name(command)))?;
    Ok(serde_json::from_str(&text)?)
}
