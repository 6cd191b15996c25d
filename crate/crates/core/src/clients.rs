//! HTTP clients for the captioner, embedding and LLM services.
//!
//! Wire formats are JSON over POST; see `docs/API.md`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{Captioner, SimilarityBackend, SimilarityError};
use crate::instruct::LlmClient;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("service returned status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
struct JsonEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl JsonEndpoint {
    fn new(base: &str, path: &str, token: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { client, url: format!("{}/{}", base.trim_end_matches('/'), path), token })
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, body: &Req) -> Result<Resp, ClientError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ClientError::Status(resp.status().as_u16()));
        }
        resp.json().map_err(|e| ClientError::Malformed(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
pub struct CaptionRequest {
    pub record_id: String,
    pub image: String,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
pub struct CaptionResponse {
    pub captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct SimilarityRequest {
    pub pairs: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
pub struct SimilarityResponse {
    pub scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
}

#[derive(Serialize, Deserialize)]
pub struct CompletionResponse {
    pub completion: String,
}

pub struct HttpCaptioner(JsonEndpoint);

impl HttpCaptioner {
    pub fn new(base: &str, token: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        JsonEndpoint::new(base, "v1/caption", token, timeout).map(Self)
    }
}

impl Captioner for HttpCaptioner {
    fn sample_captions(&self, record_id: &str, image_ref: &str, n: usize) -> Result<Vec<String>, ClientError> {
        let resp: CaptionResponse =
            self.0.post(&CaptionRequest { record_id: record_id.into(), image: image_ref.into(), n })?;
        Ok(resp.captions)
    }
}

pub struct HttpEmbedder(JsonEndpoint);

impl HttpEmbedder {
    pub fn new(base: &str, token: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        JsonEndpoint::new(base, "v1/similarity", token, timeout).map(Self)
    }

    pub fn batch(&self, pairs: Vec<(String, String)>) -> Result<Vec<f64>, ClientError> {
        let expected = pairs.len();
        let resp: SimilarityResponse = self.0.post(&SimilarityRequest { pairs })?;
        if resp.scores.len() != expected {
            return Err(ClientError::Malformed(format!("expected {expected} scores, got {}", resp.scores.len())));
        }
        if resp.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(ClientError::Malformed("score outside [0, 1]".into()));
        }
        Ok(resp.scores)
    }
}

impl SimilarityBackend for HttpEmbedder {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        if a == b && !a.is_empty() {
            return Ok(1.0);
        }
        // Canonical argument order keeps remote scores symmetric.
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.batch(vec![(x.to_string(), y.to_string())])
            .map(|s| s[0])
            .map_err(|e| SimilarityError::BackendUnavailable(e.to_string()))
    }
}

pub struct HttpLlm(JsonEndpoint);

impl HttpLlm {
    pub fn new(base: &str, token: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        JsonEndpoint::new(base, "v1/complete", token, timeout).map(Self)
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, system: &str, user: &str) -> Result<String, ClientError> {
        let resp: CompletionResponse = self.0.post(&CompletionRequest { system: system.into(), user: user.into() })?;
        Ok(resp.completion)
    }
}
