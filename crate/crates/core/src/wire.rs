//! Sidecar wire protocol: JSON bodies with base64 payloads that declare
//! their byte length, and a blocking HTTP client with retries.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{url}: HTTP {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("{url}: {message}")]
    Connection { url: String, message: String },
    #[error("malformed JSON from {url}: {source}")]
    Json { url: String, source: serde_json::Error },
    #[error("bad payload field {field}: {message}")]
    Payload { field: String, message: String },
}

/// Base64 of little-endian f32 values, with the decoded byte count.
pub fn encode_f32(values: &[f64]) -> (String, usize) {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    (B64.encode(&bytes), bytes.len())
}

pub fn decode_f32(field: &str, data: &str, nbytes: usize, expected: usize) -> Result<Vec<f64>, TransportError> {
    let bytes = decode_bytes(field, data, nbytes)?;
    if bytes.len() != expected * 4 {
        return Err(TransportError::Payload { field: field.into(), message: format!("{} bytes for {expected} float32 values", bytes.len()) });
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect())
}

pub fn encode_bytes(bytes: &[u8]) -> (String, usize) {
    (B64.encode(bytes), bytes.len())
}

pub fn decode_bytes(field: &str, data: &str, nbytes: usize) -> Result<Vec<u8>, TransportError> {
    let bytes = B64.decode(data).map_err(|e| TransportError::Payload { field: field.into(), message: e.to_string() })?;
    if bytes.len() != nbytes {
        return Err(TransportError::Payload { field: field.into(), message: format!("declared {nbytes} bytes, decoded {}", bytes.len()) });
    }
    Ok(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rgb,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRequest {
    pub latent: String,
    pub latent_nbytes: usize,
    pub shape: Vec<usize>,
    pub timestep: u32,
    pub noise: String,
    pub noise_nbytes: usize,
    pub prompt: String,
    pub token_scales: BTreeMap<String, f64>,
    pub branch: Branch,
    pub guidance_scale: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResponse {
    pub noise_pred: String,
    pub noise_pred_nbytes: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub image_nbytes: usize,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
    pub mask_nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub ok: bool,
    pub model_ids: Vec<String>,
}

pub const DENOISE_PATH: &str = "/v1/denoise";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const HEALTH_PATH: &str = "/v1/health";

/// Blocking JSON client. Connection failures and 5xx responses are retried
/// with exponential backoff; 4xx responses fail immediately.
#[derive(Clone, Debug)]
pub struct HttpClient {
    pub base_url: String,
    pub attempts: u32,
    pub backoff: Duration,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { base_url: base_url.trim_end_matches('/').to_string(), attempts: 3, backoff: Duration::from_millis(250), agent }
    }

    pub fn with_retry(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn post<Q: Serialize, R: DeserializeOwned>(&self, path: &str, body: &Q) -> Result<R, TransportError> {
        let payload = serde_json::to_string(body).map_err(|e| TransportError::Payload { field: "request".into(), message: e.to_string() })?;
        self.call(path, Some(&payload))
    }

    pub fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R, TransportError> {
        self.call(path, None)
    }

    fn call<R: DeserializeOwned>(&self, path: &str, payload: Option<&str>) -> Result<R, TransportError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last = None;
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let result = match payload {
                Some(p) => self.agent.post(&url).set("Content-Type", "application/json").send_string(p),
                None => self.agent.get(&url).call(),
            };
            let err = match result {
                Ok(resp) => {
                    let text = resp.into_string().map_err(|e| TransportError::Connection { url: url.clone(), message: e.to_string() })?;
                    return serde_json::from_str(&text).map_err(|source| TransportError::Json { url: url.clone(), source });
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    let e = TransportError::Status { url: url.clone(), status, body };
                    if status < 500 {
                        return Err(e);
                    }
                    e
                }
                Err(ureq::Error::Transport(t)) => TransportError::Connection { url: url.clone(), message: t.to_string() },
            };
            log::warn!("attempt {}/{} failed: {err}", attempt + 1, self.attempts);
            last = Some(err);
        }
        Err(last.expect("at least one attempt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_payload_round_trip_and_length_checks() {
        let v = vec![0.5, -1.25, 0.375e-8f32 as f64, 1.0e6];
        let (s, n) = encode_f32(&v);
        assert_eq!(n, 16);
        assert_eq!(decode_f32("x", &s, n, 4).unwrap(), v);
        assert!(matches!(decode_f32("x", &s, 12, 4), Err(TransportError::Payload { .. })));
        assert!(matches!(decode_f32("x", &s, 16, 3), Err(TransportError::Payload { .. })));
        assert!(matches!(decode_bytes("x", "!!", 1), Err(TransportError::Payload { .. })));
    }

    #[test]
    fn branch_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&Branch::Depth).unwrap(), "\"depth\"");
    }

    #[test]
    fn unreachable_server_fails_after_retries() {
        // port 9 on localhost is almost certainly closed
        let c = HttpClient::new("http://127.0.0.1:9", Duration::from_millis(200)).with_retry(2, Duration::from_millis(1));
        let r: Result<HealthResponse, _> = c.get(HEALTH_PATH);
        assert!(matches!(r, Err(TransportError::Connection { .. })));
    }
}
