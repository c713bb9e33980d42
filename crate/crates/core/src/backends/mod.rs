//! The boundary to generation, hallucination scoring, object detection and
//! word embedding.
//!
//! Each capability is a trait so the engine can run against a remote service
//! speaking the [`protocol`], a file-backed fixture or the seeded
//! [`sim::SimWorld`]. Backends never own randomness: generation requests
//! carry an explicit seed chosen by the engine.

pub mod fixture;
pub mod protocol;
pub mod remote;
pub mod sim;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::config::{EngineConfig, GuidanceConfig};
use crate::error::{Error, Result};
use crate::extraction::{Lexicon, MentionExtractor};
use crate::rewards::{Embedding, ObjectMention};

pub use protocol::{
    Detection, GenerateRequest, GenerateResponse, GeneratedText, ScoreRequest, Stop,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("TRANSPORT: {0}")]
    Transport(String),
    #[error("SCHEMA: {0}")]
    Schema(String),
    #[error("SERVICE_REPORTED: {0}")]
    ServiceReported(String),
    #[error("UNKNOWN_PREFIX: {0:?}")]
    UnknownPrefix(String),
    #[error("UNKNOWN_IMAGE: {0}")]
    UnknownImage(String),
    #[error("UNKNOWN_RESPONSE: no fixture score for {0:?}")]
    UnknownResponse(String),
    #[error("EMBEDDING_UNAVAILABLE({0})")]
    EmbeddingUnavailable(String),
    #[error("UNCONFIGURED: no {0} backend configured")]
    Unconfigured(&'static str),
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
}

/// Hallucination reward in [0, 1].
pub trait HalScorer: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError>;
}

pub trait Detector: Send + Sync {
    fn detect(&self, image_ref: &str) -> Result<Vec<Detection>, BackendError>;
}

/// Unit-norm word embeddings, one per label, constant dimension.
pub trait Embedder: Send + Sync {
    fn embed(&self, labels: &[String]) -> Result<Vec<Embedding>, BackendError>;
}

/// Placeholder for a capability the current command does not use.
#[derive(Debug, Clone, Copy)]
pub struct Unconfigured(pub &'static str);

impl Generator for Unconfigured {
    fn generate(&self, _: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        Err(BackendError::Unconfigured(self.0))
    }
}

impl HalScorer for Unconfigured {
    fn score(&self, _: &ScoreRequest) -> Result<f64, BackendError> {
        Err(BackendError::Unconfigured(self.0))
    }
}

impl Detector for Unconfigured {
    fn detect(&self, _: &str) -> Result<Vec<Detection>, BackendError> {
        Err(BackendError::Unconfigured(self.0))
    }
}

impl Embedder for Unconfigured {
    fn embed(&self, _: &[String]) -> Result<Vec<Embedding>, BackendError> {
        Err(BackendError::Unconfigured(self.0))
    }
}

/// Returns the same detections for every image.
#[derive(Debug, Clone, Default)]
pub struct StaticDetector(pub Vec<Detection>);

impl Detector for StaticDetector {
    fn detect(&self, _: &str) -> Result<Vec<Detection>, BackendError> {
        Ok(self.0.clone())
    }
}

/// Everything an episode needs from the outside world.
#[derive(Clone)]
pub struct BackendSet {
    pub generator: Arc<dyn Generator>,
    pub scorer: Arc<dyn HalScorer>,
    pub detector: Arc<dyn Detector>,
    pub embedder: Arc<dyn Embedder>,
    pub extractor: Arc<dyn MentionExtractor>,
    /// Detections below this confidence are dropped before forming the
    /// reference object list.
    pub detect_floor: f64,
}

impl BackendSet {
    pub fn new(
        generator: Arc<dyn Generator>,
        scorer: Arc<dyn HalScorer>,
        detector: Arc<dyn Detector>,
        embedder: Arc<dyn Embedder>,
        extractor: Arc<dyn MentionExtractor>,
    ) -> Self {
        BackendSet {
            generator,
            scorer,
            detector,
            embedder,
            extractor,
            detect_floor: crate::config::DEFAULT_DETECT_FLOOR,
        }
    }

    pub fn with_detect_floor(mut self, floor: f64) -> Self {
        self.detect_floor = floor;
        self
    }

    /// All five roles served by one simulated world.
    pub fn simulated(world: Arc<sim::SimWorld>) -> Self {
        let lexicon = Arc::new(world.lexicon());
        BackendSet::new(world.clone(), world.clone(), world.clone(), world, lexicon)
    }

    /// Detected objects above the confidence floor, canonicalized and
    /// deduplicated in detection order.
    pub fn reference_objects(&self, image_ref: &str) -> Result<Vec<ObjectMention>, BackendError> {
        let mut seen = BTreeSet::new();
        Ok(self
            .detector
            .detect(image_ref)?
            .into_iter()
            .filter(|d| d.confidence >= self.detect_floor)
            .filter_map(|d| {
                let canonical = self
                    .extractor
                    .canonicalize(&d.label)
                    .unwrap_or_else(|| d.label.trim().to_lowercase());
                seen.insert(canonical.clone())
                    .then(|| ObjectMention::new(d.label, canonical))
            })
            .collect())
    }
}

/// Where a capability comes from: `http(s)://...`, `fixture:<path>` or
/// `sim:<path>`. `sim:default` is the built-in world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Remote(String),
    Fixture(PathBuf),
    Sim(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("fixture:") {
            Ok(BackendSpec::Fixture(PathBuf::from(path)))
        } else if let Some(path) = s.strip_prefix("sim:") {
            Ok(BackendSpec::Sim(PathBuf::from(path)))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(BackendSpec::Remote(s.to_string()))
        } else {
            Err(Error::Config(format!(
                "backend {s:?} must be a URL, fixture:<path> or sim:<path>"
            )))
        }
    }
}

/// Which roles a command actually exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub generator: bool,
    pub scorer: bool,
    pub recall: bool,
}

impl Needs {
    /// Roles required by guided decoding with `guidance`: the scorer unless
    /// `w == 0`, detection and embedding unless `w == 1`.
    pub fn for_guidance(guidance: &GuidanceConfig, generator: bool) -> Self {
        Needs {
            generator,
            scorer: guidance.w > 0.0,
            recall: guidance.w < 1.0,
        }
    }
}

#[derive(Default)]
struct Loader {
    worlds: HashMap<PathBuf, Arc<sim::SimWorld>>,
    annotation_lexicon: Option<PathBuf>,
}

impl Loader {
    fn world(&mut self, path: &Path) -> Result<Arc<sim::SimWorld>> {
        if let Some(w) = self.worlds.get(path) {
            return Ok(w.clone());
        }
        let world = if path == Path::new(sim::DEFAULT_WORLD) {
            Arc::new(sim::SimWorld::default())
        } else {
            Arc::new(sim::SimWorld::load(path)?)
        };
        self.worlds.insert(path.to_path_buf(), world.clone());
        Ok(world)
    }
}

/// Builds the backend set described by `cfg`. Roles listed in `needs` must
/// be configured; the rest default to [`Unconfigured`].
pub fn build_backends(cfg: &EngineConfig, needs: Needs) -> Result<BackendSet> {
    let spec = |role: &str, value: &Option<String>, required: bool| -> Result<Option<BackendSpec>> {
        match value {
            Some(v) => v.parse().map(Some),
            None if required => Err(Error::Config(format!(
                "no {role} backend configured (set backend_{role} or --backend-{role})"
            ))),
            None => Ok(None),
        }
    };
    let mut loader = Loader::default();

    let generator: Arc<dyn Generator> =
        match spec("generate", &cfg.backend_generate, needs.generator)? {
            None => Arc::new(Unconfigured("generate")),
            Some(BackendSpec::Remote(url)) => Arc::new(remote::RemoteBackend::new(&url)),
            Some(BackendSpec::Fixture(p)) => Arc::new(fixture::FixtureTree::load(&p)?),
            Some(BackendSpec::Sim(p)) => loader.world(&p)?,
        };
    let scorer: Arc<dyn HalScorer> = match spec("score", &cfg.backend_score, needs.scorer)? {
        None => Arc::new(Unconfigured("score")),
        Some(BackendSpec::Remote(url)) => Arc::new(remote::RemoteBackend::new(&url)),
        Some(BackendSpec::Fixture(p)) => Arc::new(fixture::ScoreTable::load(&p)?),
        Some(BackendSpec::Sim(p)) => loader.world(&p)?,
    };
    let detector: Arc<dyn Detector> = match spec("detect", &cfg.backend_detect, needs.recall)? {
        None => Arc::new(Unconfigured("detect")),
        Some(BackendSpec::Remote(url)) => Arc::new(remote::RemoteBackend::new(&url)),
        Some(BackendSpec::Fixture(p)) => {
            let file = fixture::AnnotationFile::load(&p)?;
            loader.annotation_lexicon = file.lexicon_path();
            Arc::new(file)
        }
        Some(BackendSpec::Sim(p)) => loader.world(&p)?,
    };
    let embedder: Arc<dyn Embedder> = match spec("embed", &cfg.backend_embed, needs.recall)? {
        None => Arc::new(Unconfigured("embed")),
        Some(BackendSpec::Remote(url)) => Arc::new(remote::RemoteBackend::new(&url)),
        Some(BackendSpec::Fixture(p)) => Arc::new(fixture::EmbeddingTable::load(&p)?),
        Some(BackendSpec::Sim(p)) => loader.world(&p)?,
    };

    let lexicon = if let Some(path) = &cfg.lexicon {
        Lexicon::load(path)?
    } else if let Some(path) = &loader.annotation_lexicon {
        Lexicon::load(path)?
    } else if let Some(world) = loader.worlds.values().next() {
        world.lexicon()
    } else if needs.recall {
        return Err(Error::Config(
            "recall guidance needs a lexicon (set lexicon or --lexicon)".into(),
        ));
    } else {
        Lexicon::default()
    };

    Ok(BackendSet::new(generator, scorer, detector, embedder, Arc::new(lexicon))
        .with_detect_floor(cfg.detect_floor()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "fixture:a/b.json".parse::<BackendSpec>().unwrap(),
            BackendSpec::Fixture("a/b.json".into())
        );
        assert_eq!(
            "sim:w.json".parse::<BackendSpec>().unwrap(),
            BackendSpec::Sim("w.json".into())
        );
        assert!(matches!(
            "http://localhost:9/".parse::<BackendSpec>().unwrap(),
            BackendSpec::Remote(_)
        ));
        assert!("ftp://x".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn reference_objects_apply_floor_and_fold() {
        let lexicon = Lexicon::parse("cat: kitten\ndog\n").unwrap();
        let detections = vec![
            Detection { label: "kitten".into(), confidence: 0.9 },
            Detection { label: "Cat".into(), confidence: 0.8 },
            Detection { label: "dog".into(), confidence: 0.05 },
            Detection { label: "Lamp".into(), confidence: 0.5 },
        ];
        let set = BackendSet::new(
            Arc::new(Unconfigured("generate")),
            Arc::new(Unconfigured("score")),
            Arc::new(StaticDetector(detections)),
            Arc::new(Unconfigured("embed")),
            Arc::new(lexicon),
        );
        let refs: Vec<String> = set
            .reference_objects("img")
            .unwrap()
            .into_iter()
            .map(|m| m.canonical)
            .collect();
        assert_eq!(refs, ["cat", "lamp"]);
        let set = set.with_detect_floor(0.0);
        assert_eq!(set.reference_objects("img").unwrap().len(), 3);
    }

    #[test]
    fn missing_required_role_is_a_config_error() {
        let cfg = EngineConfig::default();
        let needs = Needs { generator: true, scorer: false, recall: false };
        let err = build_backends(&cfg, needs).err().unwrap();
        assert!(err.is_config_error());
        let needs = Needs { generator: false, scorer: false, recall: false };
        assert!(build_backends(&cfg, needs).is_ok());
    }
}
