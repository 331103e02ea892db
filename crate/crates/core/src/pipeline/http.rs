//! HTTP/JSON client for a model server.
//!
//! ```text
//! POST /generate {encoder_input, decoder_prefix, max_new_tokens} -> {text}
//! POST /score    {encoder_input, decoder_prefix, target}         -> {token_ces: [float]}
//! GET  /health                                                   -> {status, model_id}
//! ```

use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::backend::{BackendError, GeneratorBackend};

/// Overrides the backend URL given on the command line.
pub const BACKEND_URL_ENV: &str = "CES_BACKEND_URL";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GenerateRequest {
    pub encoder_input: String,
    pub decoder_prefix: String,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ScoreRequest {
    pub encoder_input: String,
    pub decoder_prefix: String,
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreResponse {
    pub token_ces: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
}

#[derive(Clone)]
pub struct HttpBackend {
    base_url: String,
    agent: Agent,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn health(&self) -> Result<HealthResponse, BackendError> {
        let resp = self
            .agent
            .get(format!("{}/health", self.base_url))
            .call()
            .map_err(transport)?;
        read_json(resp)
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base_url))
            .send_json(body)
            .map_err(transport)?;
        read_json(resp)
    }
}

fn transport(e: ureq::Error) -> BackendError {
    BackendError::Transport(e.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(
    mut resp: ureq::http::Response<ureq::Body>,
) -> Result<T, BackendError> {
    let status = resp.status().as_u16();
    if status >= 500 {
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(BackendError::Transport(format!(
            "server error {status}: {body}"
        )));
    }
    if status >= 400 {
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(BackendError::Protocol(format!(
            "request rejected with {status}: {body}"
        )));
    }
    resp.body_mut()
        .read_json()
        .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))
}

impl GeneratorBackend for HttpBackend {
    fn generate(
        &self,
        encoder_input: &str,
        decoder_prefix: &str,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        let resp: GenerateResponse = self.post(
            "/generate",
            &GenerateRequest {
                encoder_input: encoder_input.to_owned(),
                decoder_prefix: decoder_prefix.to_owned(),
                max_new_tokens,
            },
        )?;
        Ok(resp.text)
    }

    fn score(
        &self,
        encoder_input: &str,
        decoder_prefix: &str,
        target: &str,
    ) -> Result<Vec<f64>, BackendError> {
        let resp: ScoreResponse = self.post(
            "/score",
            &ScoreRequest {
                encoder_input: encoder_input.to_owned(),
                decoder_prefix: decoder_prefix.to_owned(),
                target: target.to_owned(),
            },
        )?;
        Ok(resp.token_ces)
    }
}
