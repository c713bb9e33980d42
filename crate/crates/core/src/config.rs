//! Shared domain types and configuration validation.
//!
//! Validation is total: every value either passes unchanged or yields one
//! [`Error::OutOfRange`] naming the first offending field in declaration
//! order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The multimodal prompt: an image reference plus the visual instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualContext {
    pub image_ref: String,
    pub instruction: String,
}

impl VisualContext {
    pub fn new(image_ref: impl Into<String>, instruction: impl Into<String>) -> Result<Self> {
        let ctx = VisualContext {
            image_ref: image_ref.into(),
            instruction: instruction.into(),
        };
        ctx.validate()
    }

    pub fn validate(self) -> Result<Self> {
        if self.instruction.trim().is_empty() {
            return Err(Error::out_of_range("instruction", "must be non-empty"));
        }
        Ok(self)
    }
}

/// How many sentences a candidate covers before rewards are evaluated.
///
/// `Infinity` turns decoding into a single round of best-of-k over complete
/// responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SentencePeriod {
    Sentences(u32),
    Infinity,
}

impl SentencePeriod {
    pub fn is_infinite(self) -> bool {
        matches!(self, SentencePeriod::Infinity)
    }
}

impl fmt::Display for SentencePeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SentencePeriod::Sentences(n) => write!(f, "{n}"),
            SentencePeriod::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for SentencePeriod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(SentencePeriod::Infinity);
        }
        s.parse::<u32>()
            .map(SentencePeriod::Sentences)
            .map_err(|_| Error::out_of_range("T", format!("expected a positive integer or \"inf\", got {s:?}")))
    }
}

impl Serialize for SentencePeriod {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            SentencePeriod::Sentences(n) => serializer.serialize_u32(*n),
            SentencePeriod::Infinity => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for SentencePeriod {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(n) => u32::try_from(n)
                .map(SentencePeriod::Sentences)
                .map_err(|_| serde::de::Error::custom(format!("T out of range: {n}"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// Candidates sampled per round.
    pub k: u32,
    #[serde(rename = "T")]
    pub period: SentencePeriod,
    pub temperature: f64,
    /// Hard cap on the number of tokens in the final response.
    pub max_total_tokens: u32,
    pub max_iterations: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            k: 30,
            period: SentencePeriod::Sentences(1),
            temperature: 1.0,
            max_total_tokens: 512,
            max_iterations: 64,
        }
    }
}

impl GenerationParams {
    pub fn validate(self) -> Result<Self> {
        if self.k < 1 {
            return Err(Error::out_of_range("k", format!("must be >= 1, got {}", self.k)));
        }
        if self.period == SentencePeriod::Sentences(0) {
            return Err(Error::out_of_range("T", "must be >= 1 or inf"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::out_of_range(
                "temperature",
                format!("must be a finite value >= 0, got {}", self.temperature),
            ));
        }
        if self.max_total_tokens < 1 {
            return Err(Error::out_of_range("max_total_tokens", "must be >= 1"));
        }
        if self.max_iterations < 1 {
            return Err(Error::out_of_range("max_iterations", "must be >= 1"));
        }
        Ok(self)
    }
}

pub fn validate_generation_params(params: GenerationParams) -> Result<GenerationParams> {
    params.validate()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalNormalization {
    #[default]
    None,
    /// Rescale hallucination rewards to [0, 1) across the candidates of a round.
    Minmax,
}

impl FromStr for HalNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(HalNormalization::None),
            "minmax" => Ok(HalNormalization::Minmax),
            other => Err(Error::Config(format!("unknown hal_normalization {other:?}"))),
        }
    }
}

/// Which text the hallucination reward sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalScope {
    /// Prefix plus candidate.
    #[default]
    FullPrefix,
    /// Candidate only, for reward models with a short text context.
    LastChunk,
}

impl FromStr for HalScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full_prefix" => Ok(HalScope::FullPrefix),
            "last_chunk" => Ok(HalScope::LastChunk),
            other => Err(Error::Config(format!("unknown hal_scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Weight of the hallucination reward; `1 - w` goes to the recall reward.
    pub w: f64,
    /// Similarity a predicted object must exceed to count as recalled.
    pub tau: f64,
    pub hal_normalization: HalNormalization,
    pub hal_scope: HalScope,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w: 0.5,
            tau: 0.5,
            hal_normalization: HalNormalization::None,
            hal_scope: HalScope::FullPrefix,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(self) -> Result<Self> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::out_of_range("w", format!("must lie in [0, 1], got {}", self.w)));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::out_of_range(
                "tau",
                format!("must lie in [-1, 1], got {}", self.tau),
            ));
        }
        Ok(self)
    }
}

pub fn validate_guidance_config(cfg: GuidanceConfig) -> Result<GuidanceConfig> {
    cfg.validate()
}

/// Flat key/value engine configuration as read from a TOML file.
///
/// Every key is optional; [`EngineConfig::merge`] layers command-line
/// overrides on top of file values, and the accessors fill in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub w: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<u32>,
    #[serde(rename = "T")]
    pub period: Option<SentencePeriod>,
    pub temperature: Option<f64>,
    pub max_total_tokens: Option<u32>,
    pub max_iterations: Option<u32>,
    pub hal_normalization: Option<HalNormalization>,
    pub hal_scope: Option<HalScope>,
    pub seed: Option<u64>,
    pub backend_generate: Option<String>,
    pub backend_score: Option<String>,
    pub backend_detect: Option<String>,
    pub backend_embed: Option<String>,
    pub lexicon: Option<String>,
    pub detect_floor: Option<f64>,
    pub preset: Option<String>,
}

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_DETECT_FLOOR: f64 = 0.1;

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|span| text[..span.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: "<config>".into(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Returns `self` with every value set in `overrides` replacing it.
    pub fn merge(self, overrides: EngineConfig) -> EngineConfig {
        macro_rules! pick {
            ($($field:ident),*) => {
                EngineConfig { $($field: overrides.$field.or(self.$field)),* }
            };
        }
        pick!(
            w,
            tau,
            k,
            period,
            temperature,
            max_total_tokens,
            max_iterations,
            hal_normalization,
            hal_scope,
            seed,
            backend_generate,
            backend_score,
            backend_detect,
            backend_embed,
            lexicon,
            detect_floor,
            preset
        )
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        let d = GuidanceConfig::default();
        GuidanceConfig {
            w: self.w.unwrap_or(d.w),
            tau: self.tau.unwrap_or(d.tau),
            hal_normalization: self.hal_normalization.unwrap_or(d.hal_normalization),
            hal_scope: self.hal_scope.unwrap_or(d.hal_scope),
        }
        .validate()
    }

    pub fn generation(&self) -> Result<GenerationParams> {
        let d = GenerationParams::default();
        GenerationParams {
            k: self.k.unwrap_or(d.k),
            period: self.period.unwrap_or(d.period),
            temperature: self.temperature.unwrap_or(d.temperature),
            max_total_tokens: self.max_total_tokens.unwrap_or(d.max_total_tokens),
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
        }
        .validate()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn detect_floor(&self) -> Result<f64> {
        let floor = self.detect_floor.unwrap_or(DEFAULT_DETECT_FLOOR);
        if !(0.0..=1.0).contains(&floor) {
            return Err(Error::out_of_range("detect_floor", format!("must lie in [0, 1], got {floor}")));
        }
        Ok(floor)
    }
}
