//! Wire protocol shared with remote generation, scoring, detection and
//! embedding services.
//!
//! Each capability is one HTTP POST endpoint carrying a JSON document with
//! lower_snake_case fields. Every request carries `"version": "mrgd/1"` and
//! every reply must echo it.

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::rewards::UNIT_NORM_TOLERANCE;

pub const PROTOCOL_VERSION: &str = "mrgd/1";

pub const GENERATE_PATH: &str = "/v1/generate";
pub const SCORE_PATH: &str = "/v1/score";
pub const DETECT_PATH: &str = "/v1/detect";
pub const EMBED_PATH: &str = "/v1/embed";

fn version() -> String {
    PROTOCOL_VERSION.to_string()
}

fn check_version(found: &str) -> Result<(), BackendError> {
    if found == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(BackendError::Schema(format!(
            "unsupported protocol version {found:?}, expected {PROTOCOL_VERSION:?}"
        )))
    }
}

/// Where a sampled continuation must stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stop {
    /// Stop right after this many `'.'` delimiters.
    SentenceBoundaries(u32),
    /// Run to end of sequence (or `max_tokens`).
    ToEos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub version: String,
    pub image_ref: String,
    pub instruction: String,
    pub prefix: String,
    pub num_samples: u32,
    pub temperature: f64,
    pub stop: Stop,
    pub max_tokens: u32,
    pub seed: u64,
}

impl GenerateRequest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_ref: &str,
        instruction: &str,
        prefix: &str,
        num_samples: u32,
        temperature: f64,
        stop: Stop,
        max_tokens: u32,
        seed: u64,
    ) -> Self {
        GenerateRequest {
            version: version(),
            image_ref: image_ref.to_string(),
            instruction: instruction.to_string(),
            prefix: prefix.to_string(),
            num_samples,
            temperature,
            stop,
            max_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        check_version(&self.version)?;
        if self.num_samples == 0 {
            return Err(BackendError::Schema("num_samples must be >= 1".into()));
        }
        if self.stop == Stop::SentenceBoundaries(0) {
            return Err(BackendError::Schema("sentence_boundaries must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Schema("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedText {
    pub text: String,
    pub finished: bool,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub version: String,
    pub candidates: Vec<GeneratedText>,
    /// Required when fewer than `num_samples` candidates are returned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl GenerateResponse {
    pub fn new(candidates: Vec<GeneratedText>) -> Self {
        GenerateResponse {
            version: version(),
            candidates,
            reason: None,
        }
    }

    pub fn validate(&self, req: &GenerateRequest) -> Result<(), BackendError> {
        check_version(&self.version)?;
        let n = self.candidates.len();
        let wanted = req.num_samples as usize;
        if n > wanted {
            return Err(BackendError::Schema(format!(
                "{n} candidates returned for num_samples {wanted}"
            )));
        }
        if n < wanted && self.reason.is_none() {
            return Err(BackendError::Schema(format!(
                "{n} candidates returned for num_samples {wanted} without a reason"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub version: String,
    pub image_ref: String,
    pub instruction: String,
    pub response: String,
}

impl ScoreRequest {
    pub fn new(image_ref: &str, instruction: &str, response: &str) -> Self {
        ScoreRequest {
            version: version(),
            image_ref: image_ref.to_string(),
            instruction: instruction.to_string(),
            response: response.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        check_version(&self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub version: String,
    pub score: f64,
}

impl ScoreResponse {
    pub fn new(score: f64) -> Self {
        ScoreResponse {
            version: version(),
            score,
        }
    }

    /// Scores outside [0, 1] are protocol errors, never clamped.
    pub fn validate(&self) -> Result<(), BackendError> {
        check_version(&self.version)?;
        if (0.0..=1.0).contains(&self.score) {
            Ok(())
        } else {
            Err(BackendError::Schema(format!(
                "score {} outside [0, 1]",
                self.score
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub version: String,
    pub image_ref: String,
}

impl DetectRequest {
    pub fn new(image_ref: &str) -> Self {
        DetectRequest {
            version: version(),
            image_ref: image_ref.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        check_version(&self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub version: String,
    pub detections: Vec<Detection>,
}

impl DetectResponse {
    pub fn new(detections: Vec<Detection>) -> Self {
        DetectResponse {
            version: version(),
            detections,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        check_version(&self.version)?;
        for d in &self.detections {
            if d.label.trim().is_empty() {
                return Err(BackendError::Schema("detection with empty label".into()));
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(BackendError::Schema(format!(
                    "confidence {} for {:?} outside [0, 1]",
                    d.confidence, d.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub version: String,
    pub labels: Vec<String>,
}

impl EmbedRequest {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        EmbedRequest {
            version: version(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        check_version(&self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub version: String,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbedResponse {
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        EmbedResponse {
            version: version(),
            vectors,
        }
    }

    pub fn validate(&self, req: &EmbedRequest) -> Result<(), BackendError> {
        check_version(&self.version)?;
        if self.vectors.len() != req.labels.len() {
            return Err(BackendError::Schema(format!(
                "{} vectors for {} labels",
                self.vectors.len(),
                req.labels.len()
            )));
        }
        let dim = self.vectors.first().map(Vec::len);
        for (label, v) in req.labels.iter().zip(&self.vectors) {
            if Some(v.len()) != dim || v.is_empty() {
                return Err(BackendError::Schema(format!(
                    "vector for {label:?} has dimension {}, expected {}",
                    v.len(),
                    dim.unwrap_or(0)
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(BackendError::Schema(format!(
                    "vector for {label:?} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Error document a service may return instead of a normal reply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceError {
    pub version: String,
    pub error: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn request_field_names_are_stable() {
        let req = GenerateRequest::new("img", "Describe", "A cat.", 2, 1.0, Stop::SentenceBoundaries(1), 64, 9);
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            json!({
                "version": "mrgd/1",
                "image_ref": "img",
                "instruction": "Describe",
                "prefix": "A cat.",
                "num_samples": 2,
                "temperature": 1.0,
                "stop": {"sentence_boundaries": 1},
                "max_tokens": 64,
                "seed": 9
            })
        );
        let req = GenerateRequest { stop: Stop::ToEos, ..req };
        assert_eq!(serde_json::to_value(&req).unwrap()["stop"], json!("to_eos"));
    }

    #[test]
    fn missing_finished_flag_is_a_decode_error() {
        let body = r#"{"version":"mrgd/1","candidates":[{"text":"A cat.","token_count":3}]}"#;
        assert!(serde_json::from_str::<GenerateResponse>(body).is_err());
    }

    #[test]
    fn candidate_count_rules() {
        let req = GenerateRequest::new("i", "q", "", 2, 1.0, Stop::ToEos, 10, 0);
        let one = GeneratedText { text: "x.".into(), finished: true, token_count: 2 };
        let mut resp = GenerateResponse::new(vec![one.clone()]);
        assert!(resp.validate(&req).is_err());
        resp.reason = Some("filtered".into());
        assert!(resp.validate(&req).is_ok());
        let resp = GenerateResponse::new(vec![one.clone(), one.clone(), one]);
        assert!(resp.validate(&req).is_err());
    }

    #[test]
    fn version_is_checked() {
        let mut req = DetectRequest::new("img");
        assert!(req.validate().is_ok());
        req.version = "mrgd/2".into();
        assert!(matches!(req.validate(), Err(BackendError::Schema(_))));
    }

    #[test]
    fn score_and_embedding_ranges() {
        assert!(ScoreResponse::new(1.0).validate().is_ok());
        assert!(ScoreResponse::new(1.0001).validate().is_err());
        assert!(ScoreResponse::new(f64::NAN).validate().is_err());
        let req = EmbedRequest::new(["cat", "dog"]);
        assert!(EmbedResponse::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).validate(&req).is_ok());
        assert!(EmbedResponse::new(vec![vec![1.0, 0.0], vec![0.0, 2.0]]).validate(&req).is_err());
        assert!(EmbedResponse::new(vec![vec![1.0, 0.0], vec![1.0]]).validate(&req).is_err());
        assert!(EmbedResponse::new(vec![vec![1.0, 0.0]]).validate(&req).is_err());
    }
}
