//! Blocking JSON-over-HTTP client shared by the external generator and judge.

use std::io::Read;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_response_bytes: usize,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_ms: 10_000,
            max_retries: 2,
            max_response_bytes: 1 << 20,
        }
    }
}

/// One client per endpoint; concurrent callers are serialized.
#[derive(Debug)]
pub struct JsonEndpoint {
    config: EndpointConfig,
    agent: ureq::Agent,
    gate: Mutex<()>,
}

impl JsonEndpoint {
    pub fn new(config: EndpointConfig) -> Self {
        let timeout = Duration::from_millis(config.timeout_ms);
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        Self {
            config,
            agent,
            gate: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// POSTs `body`, retrying transport failures and server errors.
    pub fn post(&self, body: &Value) -> Result<Value> {
        let _guard = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
            match self.agent.post(&self.config.url).send_json(body.clone()) {
                Ok(resp) => return self.read_body(resp),
                Err(ureq::Error::Status(code, _)) if code < 500 => {
                    return Err(Error::Transport(format!(
                        "{} answered HTTP {code}",
                        self.config.url
                    )))
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Transport(format!(
            "{} failed after {} attempts: {last}",
            self.config.url,
            self.config.max_retries + 1
        )))
    }

    fn read_body(&self, resp: ureq::Response) -> Result<Value> {
        let limit = self.config.max_response_bytes;
        let mut buf = Vec::new();
        resp.into_reader()
            .take(limit as u64 + 1)
            .read_to_end(&mut buf)
            .map_err(|e| Error::Transport(e.to_string()))?;
        if buf.len() > limit {
            return Err(Error::Validation(format!("response exceeds {limit} bytes")));
        }
        serde_json::from_slice(&buf)
            .map_err(|e| Error::Validation(format!("response is not JSON: {e}")))
    }
}
