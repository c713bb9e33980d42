//! Blocking HTTP client for the wire protocol.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{
    DetectRequest, DetectResponse, EmbedRequest, EmbedResponse, GenerateRequest,
    GenerateResponse, ScoreRequest, ScoreResponse, ServiceError, DETECT_PATH, EMBED_PATH,
    GENERATE_PATH, SCORE_PATH,
};
use super::{BackendError, Detection, Detector, Embedder, Generator, HalScorer};
use crate::rewards::Embedding;

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// One remote service. The URL may be the service root or the full endpoint
/// path; the capability path is appended when missing.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(url: &str) -> Self {
        Self::with_timeout(url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            base_url: url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn endpoint(&self, path: &str) -> String {
        if self.base_url.ends_with(path) {
            self.base_url.clone()
        } else {
            format!("{}{}", self.base_url, path)
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Resp, BackendError> {
        let body = serde_json::to_string(req).map_err(|e| BackendError::Schema(e.to_string()))?;
        let url = self.endpoint(path);
        let mut response = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| BackendError::Transport(format!("{url}: {e}")))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(format!("{url}: {e}")))?;
        decode_reply(status.as_u16(), &text)
    }
}

/// Interprets a reply body: service-reported errors first, then the typed
/// document.
pub fn decode_reply<Resp: DeserializeOwned>(status: u16, body: &str) -> Result<Resp, BackendError> {
    if let Ok(err) = serde_json::from_str::<ServiceError>(body) {
        return Err(BackendError::ServiceReported(err.error));
    }
    if !(200..300).contains(&status) {
        return Err(BackendError::ServiceReported(format!("HTTP {status}: {body}")));
    }
    serde_json::from_str(body).map_err(|e| BackendError::Schema(e.to_string()))
}

impl Generator for RemoteBackend {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        req.validate()?;
        let resp: GenerateResponse = self.post(GENERATE_PATH, req)?;
        resp.validate(req)?;
        Ok(resp)
    }
}

impl HalScorer for RemoteBackend {
    fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        req.validate()?;
        let resp: ScoreResponse = self.post(SCORE_PATH, req)?;
        resp.validate()?;
        Ok(resp.score)
    }
}

impl Detector for RemoteBackend {
    fn detect(&self, image_ref: &str) -> Result<Vec<Detection>, BackendError> {
        let resp: DetectResponse = self.post(DETECT_PATH, &DetectRequest::new(image_ref))?;
        resp.validate()?;
        Ok(resp.detections)
    }
}

impl Embedder for RemoteBackend {
    fn embed(&self, labels: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let req = EmbedRequest::new(labels.iter().cloned());
        let resp: EmbedResponse = self.post(EMBED_PATH, &req)?;
        resp.validate(&req)?;
        // norms were checked by validate
        Ok(resp.vectors.into_iter().map(Embedding::from_checked).collect())
    }
}
