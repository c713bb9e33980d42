//! File-backed backends for deterministic offline runs.
//!
//! * [`FixtureTree`]: JSON map from prefix text to an ordered candidate list,
//!   optionally per image, with optional hallucination-score overrides.
//! * [`ScoreTable`]: JSON map from response text to hallucination score.
//! * [`AnnotationFile`]: JSON map from image reference to object labels;
//!   serves as detector and as ground truth for evaluation.
//! * [`EmbeddingTable`]: text rows `label v1 v2 ...`, unit-norm vectors.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::protocol::{GenerateRequest, GenerateResponse, GeneratedText, ScoreRequest, Stop};
use super::{BackendError, Detection, Detector, Embedder, Generator, HalScorer};
use crate::error::{Error, Result};
use crate::rewards::{Embedding, UNIT_NORM_TOLERANCE};
use crate::segmenter::{count_boundaries, word_count};

/// Shorthand accepted for a finished, empty candidate.
pub const EOS_MARKER: &str = "<EOS>";

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawCandidate {
    Text(String),
    Record {
        text: String,
        #[serde(default)]
        finished: bool,
        #[serde(default)]
        token_count: Option<u32>,
        #[serde(default)]
        score: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCandidate {
    pub text: String,
    pub finished: bool,
    pub token_count: u32,
    pub score: Option<f64>,
}

impl From<RawCandidate> for FixtureCandidate {
    fn from(raw: RawCandidate) -> Self {
        let (text, finished, token_count, score) = match raw {
            RawCandidate::Text(t) => (t, false, None, None),
            RawCandidate::Record { text, finished, token_count, score } => {
                (text, finished, token_count, score)
            }
        };
        let (text, finished) = if text == EOS_MARKER { (String::new(), true) } else { (text, finished) };
        let token_count = token_count
            .unwrap_or_else(|| (word_count(&text) + usize::from(finished)).max(1) as u32);
        FixtureCandidate { text, finished, token_count, score }
    }
}

type Nodes = BTreeMap<String, Vec<RawCandidate>>;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTree {
    #[serde(default)]
    nodes: Nodes,
    #[serde(default)]
    images: BTreeMap<String, Nodes>,
    #[serde(default)]
    default_score: Option<f64>,
}

/// Scripted generator: for each prefix, an ordered list of continuations.
///
/// Requests get the first `num_samples` listed continuations. When the stop
/// condition asks for more sentences than a listed continuation holds, the
/// tree is followed through first children until the condition or a
/// finished node is reached.
#[derive(Debug, Clone, Default)]
pub struct FixtureTree {
    nodes: HashMap<String, Vec<FixtureCandidate>>,
    images: HashMap<String, HashMap<String, Vec<FixtureCandidate>>>,
    default_score: Option<f64>,
}

fn convert(nodes: Nodes) -> HashMap<String, Vec<FixtureCandidate>> {
    nodes
        .into_iter()
        .map(|(prefix, list)| (prefix, list.into_iter().map(Into::into).collect()))
        .collect()
}

impl FixtureTree {
    pub fn parse(json: &str) -> std::result::Result<Self, serde_json::Error> {
        let raw: RawTree = serde_json::from_str(json)?;
        Ok(FixtureTree {
            nodes: convert(raw.nodes),
            images: raw.images.into_iter().map(|(k, v)| (k, convert(v))).collect(),
            default_score: raw.default_score,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read(path)?).map_err(|e| json_error(path, e))
    }

    /// Builds a single global tree from `(prefix, candidates)` pairs.
    pub fn from_nodes<I>(nodes: I) -> Self
    where
        I: IntoIterator<Item = (String, Vec<FixtureCandidate>)>,
    {
        FixtureTree {
            nodes: nodes.into_iter().collect(),
            ..Default::default()
        }
    }

    fn children(&self, image_ref: &str, prefix: &str) -> Option<&[FixtureCandidate]> {
        self.images
            .get(image_ref)
            .and_then(|n| n.get(prefix))
            .or_else(|| self.nodes.get(prefix))
            .map(Vec::as_slice)
    }

    fn rollout(&self, req: &GenerateRequest, first: &FixtureCandidate) -> GeneratedText {
        let mut text = first.text.clone();
        let mut finished = first.finished;
        let mut tokens = first.token_count;
        let wants_more = |text: &str, tokens: u32| {
            tokens < req.max_tokens
                && match req.stop {
                    Stop::SentenceBoundaries(t) => count_boundaries(text) < t as usize,
                    Stop::ToEos => true,
                }
        };
        while !finished && wants_more(&text, tokens) {
            let prefix = format!("{}{}", req.prefix, text);
            let Some(next) = self.children(&req.image_ref, &prefix).and_then(|c| c.first()) else {
                break;
            };
            text.push_str(&next.text);
            finished = next.finished;
            tokens += next.token_count;
        }
        GeneratedText { text, finished, token_count: tokens }
    }

    /// Full response text (prefix plus candidate) to score override.
    pub fn score_overrides(&self) -> HashMap<String, f64> {
        let mut out = HashMap::new();
        let all = std::iter::once(&self.nodes).chain(self.images.values());
        for nodes in all {
            for (prefix, list) in nodes {
                for c in list {
                    if let Some(s) = c.score {
                        out.insert(format!("{prefix}{}", c.text), s);
                    }
                }
            }
        }
        out
    }
}

impl Generator for FixtureTree {
    fn generate(&self, req: &GenerateRequest) -> std::result::Result<GenerateResponse, BackendError> {
        let listed = self
            .children(&req.image_ref, &req.prefix)
            .ok_or_else(|| BackendError::UnknownPrefix(req.prefix.clone()))?;
        let n = (req.num_samples as usize).min(listed.len());
        let mut resp = GenerateResponse::new(
            listed[..n].iter().map(|c| self.rollout(req, c)).collect(),
        );
        if n < req.num_samples as usize {
            resp.reason = Some(format!("fixture lists {n} candidates for this prefix"));
        }
        Ok(resp)
    }
}

impl HalScorer for FixtureTree {
    fn score(&self, req: &ScoreRequest) -> std::result::Result<f64, BackendError> {
        ScoreTable::from(self).score(req)
    }
}

/// Hallucination scores looked up by exact response text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    pub scores: HashMap<String, f64>,
    #[serde(default)]
    pub default: Option<f64>,
}

impl From<&FixtureTree> for ScoreTable {
    fn from(tree: &FixtureTree) -> Self {
        ScoreTable {
            scores: tree.score_overrides(),
            default: tree.default_score,
        }
    }
}

impl ScoreTable {
    /// Loads either a score table or a fixture tree's score overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read(path)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
        if value.get("scores").is_some() {
            serde_json::from_value(value).map_err(|e| json_error(path, e))
        } else {
            FixtureTree::parse(&text)
                .map(|t| ScoreTable::from(&t))
                .map_err(|e| json_error(path, e))
        }
    }
}

impl HalScorer for ScoreTable {
    fn score(&self, req: &ScoreRequest) -> std::result::Result<f64, BackendError> {
        self.scores
            .get(&req.response)
            .copied()
            .or(self.default)
            .ok_or_else(|| BackendError::UnknownResponse(req.response.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Label(String),
    Scored { label: String, confidence: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotations {
    #[serde(default)]
    lexicon: Option<PathBuf>,
    images: BTreeMap<String, Vec<RawLabel>>,
}

/// Per-image object annotations. As a detector it reports the stored labels
/// (confidence 1.0 unless given).
#[derive(Debug, Clone, Default)]
pub struct AnnotationFile {
    lexicon: Option<PathBuf>,
    images: BTreeMap<String, Vec<Detection>>,
}

impl AnnotationFile {
    pub fn parse(json: &str) -> std::result::Result<Self, serde_json::Error> {
        let raw: RawAnnotations = serde_json::from_str(json)?;
        let images = raw
            .images
            .into_iter()
            .map(|(image, labels)| {
                let dets = labels
                    .into_iter()
                    .map(|l| match l {
                        RawLabel::Label(label) => Detection { label, confidence: 1.0 },
                        RawLabel::Scored { label, confidence } => Detection { label, confidence },
                    })
                    .collect();
                (image, dets)
            })
            .collect();
        Ok(AnnotationFile { lexicon: raw.lexicon, images })
    }

    /// Loads the file; a relative `lexicon` reference resolves against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = Self::parse(&read(path)?).map_err(|e| json_error(path, e))?;
        if let (Some(lex), Some(dir)) = (&file.lexicon, path.parent()) {
            if lex.is_relative() {
                file.lexicon = Some(dir.join(lex));
            }
        }
        Ok(file)
    }

    pub fn from_labels<I, L, S>(images: I) -> Self
    where
        I: IntoIterator<Item = (S, L)>,
        L: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AnnotationFile {
            lexicon: None,
            images: images
                .into_iter()
                .map(|(image, labels)| {
                    let dets = labels
                        .into_iter()
                        .map(|l| Detection { label: l.into(), confidence: 1.0 })
                        .collect();
                    (image.into(), dets)
                })
                .collect(),
        }
    }

    pub fn lexicon_path(&self) -> Option<PathBuf> {
        self.lexicon.clone()
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &[Detection])> {
        self.images.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn get(&self, image_ref: &str) -> Option<&[Detection]> {
        self.images.get(image_ref).map(Vec::as_slice)
    }
}

impl Detector for AnnotationFile {
    fn detect(&self, image_ref: &str) -> std::result::Result<Vec<Detection>, BackendError> {
        self.get(image_ref)
            .map(<[Detection]>::to_vec)
            .ok_or_else(|| BackendError::UnknownImage(image_ref.to_string()))
    }
}

/// Label to unit vector lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    rows: HashMap<String, Embedding>,
}

impl EmbeddingTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = HashMap::new();
        let mut dim = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: "<embeddings>".into(),
                line: idx + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let label = fields.next().unwrap_or_default().to_lowercase();
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(err(format!("no vector for {label:?}")));
            }
            if *dim.get_or_insert(values.len()) != values.len() {
                return Err(err(format!(
                    "dimension {} differs from earlier rows ({})",
                    values.len(),
                    dim.unwrap_or_default()
                )));
            }
            let v = Embedding::from_unit(values, UNIT_NORM_TOLERANCE).map_err(|e| err(e.to_string()))?;
            rows.insert(label, v);
        }
        Ok(EmbeddingTable { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read(path)?).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Orthonormal table: label `i` maps to basis vector `e_i`.
    pub fn one_hot<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let dim = labels.len();
        EmbeddingTable {
            rows: labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, Embedding::one_hot(dim, i)))
                .collect(),
        }
    }

    pub fn get(&self, label: &str) -> Option<&Embedding> {
        self.rows.get(label)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl Embedder for EmbeddingTable {
    fn embed(&self, labels: &[String]) -> std::result::Result<Vec<Embedding>, BackendError> {
        labels
            .iter()
            .map(|l| {
                self.rows
                    .get(l)
                    .cloned()
                    .ok_or_else(|| BackendError::EmbeddingUnavailable(l.clone()))
            })
            .collect()
    }
}
