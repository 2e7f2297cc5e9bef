use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Position-annotated failure from the report grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub expected: Vec<String>,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)?;
        if !self.expected.is_empty() {
            write!(f, " (expected one of: {})", self.expected.join(", "))?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite gradient at {path}")]
    NonFiniteGradient { path: String },
    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("cohort must contain at least one sample")]
    EmptyCohort,
    #[error("split error: {0}")]
    Split(String),
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
    #[error("report parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("character {ch:?} at byte {position} is outside the report alphabet")]
    Tokenize { position: usize, ch: char },
    #[error("rule error: {0}")]
    Rule(String),
    #[error("sequence of length {length} exceeds context window {window}")]
    Context { length: usize, window: usize },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("judge error: {0}")]
    Judge(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl fmt::Display,
        found: impl fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
