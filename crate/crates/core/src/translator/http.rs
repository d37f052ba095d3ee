//! Backend for an external language model behind a plain HTTP endpoint.
//!
//! Each stage is one JSON POST:
//!
//! ```text
//! {"stage": "translate" | "feedback", "prompt": "<text>"}
//! ```
//!
//! The response body is treated as opaque text. For stage one the first
//! command document in it is extracted and parsed; for stage two the trimmed
//! body is the passenger feedback. The API key, if any, is sent as a bearer
//! token and never logged.

use std::fmt;
use std::time::Duration;

use serde::Serialize;

use super::{extract_dsl, Backend, FeedbackMessage, FeedbackSource, Instruction, PromptBundle, TranslationError};
use crate::dsl::{parse_command, ExtractedCommand};
use crate::interface::ExecutionReport;

pub const ENDPOINT_ENV: &str = "AVCOPILOT_LLM_ENDPOINT";
pub const KEY_ENV: &str = "AVCOPILOT_LLM_API_KEY";

#[derive(Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpConfig")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(10),
        }
    }

    /// Reads the endpoint and optional key from the environment.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|e| !e.is_empty())?;
        Some(HttpConfig {
            api_key: std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty()),
            ..HttpConfig::new(endpoint)
        })
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    stage: &'a str,
    prompt: &'a str,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        HttpBackend { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn post(&self, stage: &str, prompt: &str) -> Result<String, TranslationError> {
        let body = serde_json::to_string(&RequestBody { stage, prompt })
            .map_err(|e| TranslationError::BackendUnavailable(e.to_string()))?;
        let mut req = self.agent.post(&self.config.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_string(&body).map_err(|e| match e {
            ureq::Error::Status(code, _) => TranslationError::BackendUnavailable(format!("server returned HTTP {code}")),
            ureq::Error::Transport(t) => TranslationError::BackendUnavailable(t.kind().to_string()),
        })?;
        resp.into_string().map_err(|e| TranslationError::BackendUnavailable(e.to_string()))
    }
}

fn feedback_prompt(instruction: &Instruction, command: &ExtractedCommand, report: &ExecutionReport) -> String {
    let report_json = serde_json::to_string_pretty(report).unwrap_or_default();
    format!(
        "You are the voice of an automated vehicle. Reply to the passenger in one or two short sentences, \
         based only on the execution result below. If the command was rejected or failed, say why.\n\n\
         Passenger request: {}\n\nCommand:\n{}\nExecution result:\n{report_json}\n",
        instruction.text,
        command.to_dsl(),
    )
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn translate(&self, _instruction: &Instruction, bundle: &PromptBundle) -> Result<ExtractedCommand, TranslationError> {
        let text = self.post("translate", &bundle.render())?;
        let doc = extract_dsl(&text)
            .ok_or_else(|| TranslationError::UnparseableResponse("no `command_type:` line in response".into()))?;
        parse_command(&doc).map_err(|e| TranslationError::UnparseableResponse(e.to_string()))
    }

    fn feedback(
        &self,
        instruction: &Instruction,
        command: &ExtractedCommand,
        report: &ExecutionReport,
    ) -> Result<FeedbackMessage, TranslationError> {
        let text = self.post("feedback", &feedback_prompt(instruction, command, report))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(TranslationError::UnparseableResponse("empty feedback".into()));
        }
        Ok(FeedbackMessage {
            text: text.to_string(),
            command: Some(command.to_dsl()),
            status: Some(report.status),
            source: FeedbackSource::Model,
        })
    }
}
