//! Seeded synthetic world for offline experiments.
//!
//! Every image reference deterministically picks a set of ground-truth
//! objects from the vocabulary; the remaining labels are distractors. The
//! generator emits sentences of the form `There is a {label}.` where the
//! label is ground truth with probability `truth_rate` and a distractor
//! otherwise. Each image has a sentence budget; a candidate that uses up the
//! budget is finished.
//!
//! The world also serves the other roles: the hallucination scorer is the
//! exact precision of the mentioned labels, the detector reports the ground
//! truth (optionally with misses and false positives), and embeddings are
//! one-hot over the vocabulary.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{GenerateRequest, GenerateResponse, GeneratedText, ScoreRequest, Stop};
use super::{BackendError, Detection, Detector, Embedder, Generator, HalScorer};
use crate::config::VisualContext;
use crate::error::{Error, Result};
use crate::eval::AnnotationRecord;
use crate::extraction::{Lexicon, MentionExtractor};
use crate::rewards::Embedding;
use crate::rng::SeedStream;
use crate::segmenter::{count_boundaries, truncate_words, word_count};

pub const DEFAULT_VOCABULARY: [&str; 24] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "bench", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe", "umbrella", "kite", "bottle", "chair",
];

/// Name that selects [`SimWorld::default`] in a `sim:` backend spec.
pub const DEFAULT_WORLD: &str = "default";

/// Words in one generated sentence.
pub const SENTENCE_WORDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimWorld {
    pub vocabulary: Vec<String>,
    pub objects_per_image: usize,
    pub truth_rate: f64,
    pub min_sentences: u32,
    pub max_sentences: u32,
    pub seed: u64,
    /// Distractors the detector reports as present.
    pub detector_false_positives: usize,
    /// Ground-truth objects the detector fails to report.
    pub detector_misses: usize,
}

impl Default for SimWorld {
    fn default() -> Self {
        SimWorld {
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            objects_per_image: 4,
            truth_rate: 0.6,
            min_sentences: 3,
            max_sentences: 6,
            seed: 0,
            detector_false_positives: 0,
            detector_misses: 0,
        }
    }
}

/// Per-image state derived from the world seed and the image reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEpisode {
    pub ground_truth: Vec<String>,
    pub distractors: Vec<String>,
    pub sentence_budget: u32,
}

impl SimEpisode {
    /// Draws one label: ground truth with probability `q`.
    pub fn draw_label(&self, q: f64, rng: &mut ChaCha8Rng) -> (&str, bool) {
        if rng.random::<f64>() < q {
            (&self.ground_truth[rng.random_range(0..self.ground_truth.len())], true)
        } else {
            (&self.distractors[rng.random_range(0..self.distractors.len())], false)
        }
    }
}

impl SimWorld {
    pub fn with_truth_rate(mut self, q: f64) -> Self {
        self.truth_rate = q;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(self) -> Result<Self> {
        let distinct: BTreeSet<&str> = self.vocabulary.iter().map(String::as_str).collect();
        if distinct.len() != self.vocabulary.len() {
            return Err(Error::Config("sim vocabulary has duplicate labels".into()));
        }
        if self.objects_per_image == 0 || self.objects_per_image >= self.vocabulary.len() {
            return Err(Error::out_of_range(
                "objects_per_image",
                format!(
                    "{} must be at least 1 and below the vocabulary size {}",
                    self.objects_per_image,
                    self.vocabulary.len()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.truth_rate) {
            return Err(Error::out_of_range("truth_rate", format!("{} not in [0, 1]", self.truth_rate)));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::out_of_range(
                "min_sentences",
                format!("need 1 <= min_sentences <= max_sentences, got {}..{}", self.min_sentences, self.max_sentences),
            ));
        }
        if self.detector_misses > self.objects_per_image {
            return Err(Error::out_of_range("detector_misses", "exceeds objects_per_image"));
        }
        if self.detector_false_positives > self.vocabulary.len() - self.objects_per_image {
            return Err(Error::out_of_range("detector_false_positives", "exceeds distractor count"));
        }
        Lexicon::from_labels(&self.vocabulary)?;
        Ok(self)
    }

    /// Reads a JSON world description; missing fields take defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: SimWorld = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        world.validate()
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon::from_labels(&self.vocabulary).expect("vocabulary checked by validate")
    }

    pub fn episode(&self, image_ref: &str) -> SimEpisode {
        let mut rng = SeedStream::new(self.seed).split_str(image_ref).rng();
        let mut labels = self.vocabulary.clone();
        labels.shuffle(&mut rng);
        let distractors = labels.split_off(self.objects_per_image);
        let sentence_budget = rng.random_range(self.min_sentences..=self.max_sentences);
        SimEpisode {
            ground_truth: labels,
            distractors,
            sentence_budget,
        }
    }

    /// Ground truth for evaluation.
    pub fn annotation(&self, image_ref: &str) -> AnnotationRecord {
        AnnotationRecord::new(image_ref, self.episode(image_ref).ground_truth)
    }

    /// `n` images named `sim-00000`, `sim-00001`, ... with their annotations.
    pub fn dataset(&self, n: usize, instruction: &str) -> Result<Vec<(VisualContext, AnnotationRecord)>> {
        (0..n)
            .map(|i| {
                let image_ref = format!("sim-{i:05}");
                let ann = self.annotation(&image_ref);
                Ok((VisualContext::new(image_ref, instruction)?, ann))
            })
            .collect()
    }

    /// Distinct mentioned labels that are ground truth, over distinct
    /// mentioned labels; 1.0 without mentions.
    pub fn precision(&self, image_ref: &str, text: &str) -> f64 {
        let mentions = self.lexicon().extract(text);
        if mentions.is_empty() {
            return 1.0;
        }
        let gt = self.episode(image_ref).ground_truth;
        let correct = mentions.iter().filter(|m| gt.contains(&m.canonical)).count();
        correct as f64 / mentions.len() as f64
    }

    fn sample(&self, episode: &SimEpisode, req: &GenerateRequest, index: u32) -> GeneratedText {
        let mut rng = SeedStream::new(req.seed).split(u64::from(index)).rng();
        let used = count_boundaries(&req.prefix) as u32;
        let remaining = episode.sentence_budget.saturating_sub(used);
        let count = match req.stop {
            Stop::SentenceBoundaries(t) => t.min(remaining),
            Stop::ToEos => remaining,
        };
        let mut text = String::new();
        for _ in 0..count {
            let (label, _) = episode.draw_label(self.truth_rate, &mut rng);
            if !(req.prefix.is_empty() && text.is_empty()) {
                text.push(' ');
            }
            text.push_str("There is a ");
            text.push_str(label);
            text.push('.');
        }
        let finished = count == remaining;
        let words = word_count(&text);
        let max = req.max_tokens as usize;
        let needed = words + usize::from(finished);
        if needed <= max {
            return GeneratedText { text, finished, token_count: needed.max(1) as u32 };
        }
        let kept = words.min(max);
        GeneratedText {
            text: truncate_words(&text, kept).to_string(),
            finished: false,
            token_count: kept as u32,
        }
    }
}

impl Generator for SimWorld {
    fn generate(&self, req: &GenerateRequest) -> std::result::Result<GenerateResponse, BackendError> {
        req.validate()?;
        let episode = self.episode(&req.image_ref);
        let candidates = (0..req.num_samples).map(|j| self.sample(&episode, req, j)).collect();
        Ok(GenerateResponse::new(candidates))
    }
}

impl HalScorer for SimWorld {
    fn score(&self, req: &ScoreRequest) -> std::result::Result<f64, BackendError> {
        Ok(self.precision(&req.image_ref, &req.response))
    }
}

impl Detector for SimWorld {
    fn detect(&self, image_ref: &str) -> std::result::Result<Vec<Detection>, BackendError> {
        let episode = self.episode(image_ref);
        let kept = episode.ground_truth.len() - self.detector_misses;
        let hits = episode.ground_truth[..kept]
            .iter()
            .map(|l| Detection { label: l.clone(), confidence: 0.9 });
        let false_positives = episode.distractors[..self.detector_false_positives]
            .iter()
            .map(|l| Detection { label: l.clone(), confidence: 0.6 });
        Ok(hits.chain(false_positives).collect())
    }
}

impl Embedder for SimWorld {
    fn embed(&self, labels: &[String]) -> std::result::Result<Vec<Embedding>, BackendError> {
        let dim = self.vocabulary.len();
        labels
            .iter()
            .map(|l| {
                self.vocabulary
                    .iter()
                    .position(|v| v == l)
                    .map(|i| Embedding::one_hot(dim, i))
                    .ok_or_else(|| BackendError::EmbeddingUnavailable(l.clone()))
            })
            .collect()
    }
}
