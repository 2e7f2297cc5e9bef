use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {}: run `oculus {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("artifact directory {} is locked by another run (remove {} if it is stale)", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Core(oculus::Error),
}

impl CliError {
    /// Routes core errors onto the exit-code classes.
    pub fn from_core(e: oculus::Error) -> Self {
        match e {
            oculus::Error::Config(m) => CliError::Config(m),
            e @ (oculus::Error::Training { .. } | oculus::Error::NonFiniteGradient { .. }) => {
                CliError::Divergence(e.to_string())
            }
            e @ (oculus::Error::Evaluation(_) | oculus::Error::Judge(_)) => CliError::Evaluation(e.to_string()),
            e => CliError::Core(e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Divergence(_) => 4,
            CliError::Evaluation(_) => 5,
            CliError::Locked { .. } | CliError::Core(_) => 1,
        }
    }
}

impl From<oculus::Error> for CliError {
    fn from(e: oculus::Error) -> Self {
        CliError::from_core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(oculus::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(oculus::Error::Json(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let missing = CliError::MissingArtifact {
            path: "sft.json".into(),
            producer: "sft",
        };
        assert_eq!(missing.exit_code(), 3);
        assert!(missing.to_string().contains("oculus sft"));
        let div = CliError::from_core(oculus::Error::Training {
            epoch: 1,
            step: 2,
            message: "nan".into(),
        });
        assert_eq!(div.exit_code(), 4);
        assert_eq!(CliError::from_core(oculus::Error::Judge("down".into())).exit_code(), 5);
        assert_eq!(CliError::from_core(oculus::Error::Config("bad".into())).exit_code(), 2);
        assert_eq!(CliError::from_core(oculus::Error::EmptyCohort).exit_code(), 1);
    }
}
