//! Versioned JSON checkpoints with exact round-trip of every weight.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdamW, Parameters};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub len: usize,
}

pub fn shapes_of<P: Parameters>(params: &P) -> Vec<TensorShape> {
    params
        .names()
        .into_iter()
        .zip(params.slices())
        .map(|(name, s)| TensorShape { name, len: s.len() })
        .collect()
}

/// A model together with the state needed to resume or audit it.
/// `metadata` carries module-specific extras such as configs or hashes of
/// upstream checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<M> {
    pub format_version: u32,
    pub module: String,
    pub shapes: Vec<TensorShape>,
    pub model: M,
    pub optimizer: Vec<AdamW>,
    pub rng_seed: u64,
    pub metadata: serde_json::Value,
}

impl<M: Parameters> Checkpoint<M> {
    pub fn new(module: impl Into<String>, model: M, optimizer: Vec<AdamW>, rng_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            module: module.into(),
            shapes: shapes_of(&model),
            model,
            optimizer,
            rng_seed,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    fn check(&self, module: &str) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.module != module {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds module {:?}, expected {module:?}",
                self.module
            )));
        }
        if shapes_of(&self.model) != self.shapes {
            return Err(Error::Checkpoint("declared shapes do not match the stored weights".into()));
        }
        if self.model.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Checkpoint("checkpoint contains non-finite weights".into()));
        }
        Ok(())
    }
}

impl<M: Parameters + Serialize> Checkpoint<M> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl<M: Parameters + DeserializeOwned> Checkpoint<M> {
    pub fn from_json(text: &str, module: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ck.check(module)?;
        Ok(ck)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<M: Parameters + Serialize>(path: &Path, ck: &Checkpoint<M>) -> Result<()> {
    write_atomic(path, ck.to_json()?.as_bytes())
}

pub fn load_checkpoint<M: Parameters + DeserializeOwned>(path: &Path, module: &str) -> Result<Checkpoint<M>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_json(&text, module)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
