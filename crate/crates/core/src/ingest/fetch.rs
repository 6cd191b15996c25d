//! Polite HTTP fetching.
//!
//! A [`Fetcher`] enforces, per host, at most one request in flight and a
//! minimum gap between the end of one request and the start of the next.
//! Transient failures (timeouts, connection errors, 429 and 5xx) are retried
//! with exponential backoff.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolitenessConfig {
    pub min_spacing_ms: u64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    pub deny_hosts: Vec<String>,
    pub user_agent: String,
}

impl Default for PolitenessConfig {
    fn default() -> Self {
        Self {
            min_spacing_ms: 1000,
            max_attempts: 3,
            backoff_base_ms: 500,
            timeout_ms: 30_000,
            deny_hosts: Vec::new(),
            user_agent: concat!("tidepool/", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("invalid uri `{0}`")]
    InvalidUri(String),
    #[error("unsupported scheme `{0}` (only http and https)")]
    UnsupportedScheme(String),
    #[error("host `{0}` is on the deny list")]
    HostDisallowed(String),
    #[error("request to {0} timed out")]
    FetchTimeout(String),
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone)]
pub struct FetchedResource {
    pub body: Vec<u8>,
    pub media_type: String,
}

#[derive(Default)]
struct HostSlot {
    last_finished: Option<Instant>,
}

pub struct Fetcher {
    client: reqwest::blocking::Client,
    config: PolitenessConfig,
    deny: HashSet<String>,
    hosts: Mutex<HashMap<String, Arc<Mutex<HostSlot>>>>,
}

impl Fetcher {
    pub fn new(config: PolitenessConfig) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .user_agent(config.user_agent.clone())
            .build()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        let deny = config.deny_hosts.iter().map(|h| h.to_ascii_lowercase()).collect();
        Ok(Self { client, config, deny, hosts: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &PolitenessConfig {
        &self.config
    }

    fn slot(&self, host: &str) -> Arc<Mutex<HostSlot>> {
        let mut hosts = self.hosts.lock().expect("host table poisoned");
        hosts.entry(host.to_string()).or_default().clone()
    }

    pub fn fetch_resource(&self, uri: &str) -> Result<FetchedResource, FetchError> {
        let url = Url::parse(uri).map_err(|_| FetchError::InvalidUri(uri.to_string()))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(FetchError::UnsupportedScheme(url.scheme().to_string()));
        }
        let host = url.host_str().ok_or_else(|| FetchError::InvalidUri(uri.to_string()))?.to_ascii_lowercase();
        if self.deny.contains(&host) {
            return Err(FetchError::HostDisallowed(host));
        }
        let host_key = match url.port_or_known_default() {
            Some(p) => format!("{host}:{p}"),
            None => host,
        };

        // Holding the slot for the whole exchange keeps one request per host.
        let slot = self.slot(&host_key);
        let mut slot = slot.lock().expect("host slot poisoned");
        let spacing = Duration::from_millis(self.config.min_spacing_ms);
        let attempts = self.config.max_attempts.max(1);
        let mut last_err = FetchError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1))));
            }
            if let Some(prev) = slot.last_finished {
                let ready = prev + spacing;
                let now = Instant::now();
                if ready > now {
                    thread::sleep(ready - now);
                }
            }
            let outcome = self.attempt(&url);
            slot.last_finished = Some(Instant::now());
            match outcome {
                Ok(resource) => return Ok(resource),
                Err((err, retryable)) => {
                    tracing::debug!(%url, attempt, error = %err, "fetch attempt failed");
                    last_err = err;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(last_err)
    }

    fn attempt(&self, url: &Url) -> Result<FetchedResource, (FetchError, bool)> {
        let response = self.client.get(url.as_str()).send().map_err(|e| {
            if e.is_timeout() {
                (FetchError::FetchTimeout(url.to_string()), true)
            } else {
                (FetchError::Transport(e.to_string()), true)
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((FetchError::HttpStatus(status.as_u16()), retryable));
        }
        let media_type = response
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(|v| v.split(';').next().unwrap_or(v).trim().to_string())
            .unwrap_or_else(|| "application/octet-stream".into());
        let body = response.bytes().map_err(|e| {
            if e.is_timeout() {
                (FetchError::FetchTimeout(url.to_string()), true)
            } else {
                (FetchError::Transport(e.to_string()), true)
            }
        })?;
        Ok(FetchedResource { body: body.to_vec(), media_type })
    }
}
