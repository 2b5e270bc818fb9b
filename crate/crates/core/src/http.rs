//! Blocking JSON-over-HTTP plumbing shared by the remote chat and embedding clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const ENV_API_KEY: &str = "BIMEM_API_KEY";

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("HTTP status {status} from {url}")]
    Status { status: u16, url: String },
    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },
    #[error("malformed response body from {url}: {message}")]
    Body { url: String, message: String },
}

impl HttpError {
    pub fn status(&self) -> Option<u16> {
        match self {
            HttpError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// Transport failures, 429 and 5xx are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Transport { .. } => true,
            HttpError::Body { .. } => false,
        }
    }
}

/// Counting gate bounding the number of concurrent requests.
#[derive(Debug)]
pub struct InflightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightGuard<'a> {
    limit: &'a InflightLimit,
}

impl InflightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.current.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InflightGuard { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limit.current.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.limit.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    limit: InflightLimit,
}

impl JsonClient {
    pub fn new(api_key: Option<String>, max_in_flight: usize, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self {
            agent: config.into(),
            api_key,
            limit: InflightLimit::new(max_in_flight),
        }
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, HttpError> {
        let _slot = self.limit.acquire();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(status) => HttpError::Status {
                status,
                url: url.to_string(),
            },
            other => HttpError::Transport {
                url: url.to_string(),
                message: other.to_string(),
            },
        })?;
        resp.body_mut().read_json::<R>().map_err(|e| HttpError::Body {
            url: url.to_string(),
            message: e.to_string(),
        })
    }
}

pub fn env_nonempty(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}
