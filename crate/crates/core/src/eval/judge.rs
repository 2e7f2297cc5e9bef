use serde_json::json;

use super::rubric::RubricScore;
use crate::error::{Error, Result};
use crate::http::{EndpointConfig, JsonEndpoint};

/// HTTP client for a grader that answers `{candidate, prompt}` with a
/// rubric score object.
#[derive(Debug)]
pub struct ExternalJudge {
    endpoint: JsonEndpoint,
}

impl ExternalJudge {
    pub fn new(config: EndpointConfig) -> Self {
        Self {
            endpoint: JsonEndpoint::new(config),
        }
    }

    /// Every failure, from transport to schema, surfaces as a judge error
    /// so callers can skip the sample.
    pub fn score(&self, candidate: &str, grading_prompt: &str) -> Result<RubricScore> {
        let reply = self
            .endpoint
            .post(&json!({ "candidate": candidate, "prompt": grading_prompt }))
            .map_err(|e| Error::Judge(e.to_string()))?;
        let score: RubricScore =
            serde_json::from_value(reply).map_err(|e| Error::Judge(format!("reply is not a rubric score: {e}")))?;
        score.validate().map_err(|e| Error::Judge(e.to_string()))?;
        Ok(score)
    }
}
