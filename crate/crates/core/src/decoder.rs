//! Reward-guided decoding.
//!
//! Each round asks the generator for `k` continuations of the current prefix
//! that stop after `T` sentences, scores every prefix-plus-continuation with
//! `w * r_hal + (1 - w) * r_rec`, appends the best one and repeats until a
//! selected continuation is finished or a cap trips. With `T = inf` there is
//! exactly one round of complete responses, which is best-of-k.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, BackendSet, GenerateRequest, GeneratedText, ScoreRequest, Stop};
use crate::config::{
    GenerationParams, GuidanceConfig, HalNormalization, HalScope, SentencePeriod, VisualContext,
};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rewards::{
    combine_scores, minmax_normalize, recall_reward, Embedding, ObjectMention,
    DEFAULT_MINMAX_EPSILON,
};
use crate::rng::SeedStream;
use crate::segmenter::{truncate_after_boundaries, truncate_words};

/// Index of the child stream used when a round has to be re-sampled.
const RETRY_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub finished: bool,
    pub token_count: u32,
}

impl Candidate {
    fn is_degenerate(&self) -> bool {
        self.text.is_empty() && !self.finished
    }
}

impl From<GeneratedText> for Candidate {
    fn from(g: GeneratedText) -> Self {
        Candidate {
            text: g.text,
            finished: g.finished,
            token_count: g.token_count,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialResponse {
    pub text: String,
    pub chunks_selected: usize,
    pub finished: bool,
}

impl PartialResponse {
    fn append(&mut self, chunk: &Candidate) {
        debug_assert!(!self.finished);
        self.text.push_str(&chunk.text);
        self.chunks_selected += 1;
        self.finished = chunk.finished;
    }
}

/// One round of the loop. Score lists are `None` for a reward whose weight
/// is zero, since it is never evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub candidates: Vec<Candidate>,
    /// Scorer output before min-max normalization, when it was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_hal_raw: Option<Vec<f64>>,
    pub r_hal: Option<Vec<f64>>,
    pub r_rec: Option<Vec<f64>>,
    pub combined: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
    pub total_generated_tokens: u64,
    pub total_backend_calls: u64,
}

impl EpisodeTrace {
    /// True when every round selected a maximal combined score.
    pub fn is_stepwise_optimal(&self) -> bool {
        self.iterations.iter().all(|it| {
            let best = it.combined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            it.combined.get(it.selected) == Some(&best)
        })
    }

    /// Writes one JSON line per iteration.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in &self.iterations {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Eos,
    MaxTokens,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub final_text: String,
    pub trace: EpisodeTrace,
    pub termination: Termination,
}

/// Smallest index attaining the maximum.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    let (mut best, mut best_score) = (0, *scores.first().ok_or(Error::EmptyCandidates { iteration: 0 })?);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// Runs episodes against one backend set.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    backends: &'a BackendSet,
    execution: Execution,
}

struct Episode<'a> {
    decoder: Decoder<'a>,
    ctx: &'a VisualContext,
    params: GenerationParams,
    guidance: Option<GuidanceConfig>,
    root: SeedStream,
    refs: Vec<ObjectMention>,
    embeddings: BTreeMap<String, Embedding>,
    generated_tokens: u64,
    backend_calls: u64,
}

fn backend(iteration: usize) -> impl Fn(BackendError) -> Error {
    move |source| Error::Backend { iteration, source }
}

impl<'a> Decoder<'a> {
    pub fn new(backends: &'a BackendSet) -> Self {
        Decoder {
            backends,
            execution: Execution::default(),
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn decode_episode(
        &self,
        ctx: &VisualContext,
        params: GenerationParams,
        guidance: GuidanceConfig,
        seed: u64,
    ) -> Result<DecodeResult> {
        self.run(ctx, params, Some(guidance.validate()?), seed)
    }

    /// One round of `k` complete responses and one selection.
    pub fn best_of_k(
        &self,
        ctx: &VisualContext,
        params: GenerationParams,
        guidance: GuidanceConfig,
        seed: u64,
    ) -> Result<DecodeResult> {
        let params = GenerationParams {
            period: SentencePeriod::Infinity,
            ..params
        };
        self.decode_episode(ctx, params, guidance, seed)
    }

    /// Plain sampling with the same seed derivation as guided decoding:
    /// every round takes the first candidate and nothing is scored.
    pub fn sample_unguided(
        &self,
        ctx: &VisualContext,
        params: GenerationParams,
        seed: u64,
    ) -> Result<DecodeResult> {
        self.run(ctx, GenerationParams { k: 1, ..params }, None, seed)
    }

    fn run(
        &self,
        ctx: &VisualContext,
        params: GenerationParams,
        guidance: Option<GuidanceConfig>,
        seed: u64,
    ) -> Result<DecodeResult> {
        let params = params.validate()?;
        ctx.clone().validate()?;
        let mut episode = Episode {
            decoder: *self,
            ctx,
            params,
            guidance,
            root: SeedStream::new(seed),
            refs: Vec::new(),
            embeddings: BTreeMap::new(),
            generated_tokens: 0,
            backend_calls: 0,
        };
        episode.run(seed)
    }
}

/// Guided decoding with a default [`Decoder`].
pub fn decode_episode(
    ctx: &VisualContext,
    params: GenerationParams,
    guidance: GuidanceConfig,
    backends: &BackendSet,
    seed: u64,
) -> Result<DecodeResult> {
    Decoder::new(backends).decode_episode(ctx, params, guidance, seed)
}

pub fn best_of_k(
    ctx: &VisualContext,
    params: GenerationParams,
    guidance: GuidanceConfig,
    backends: &BackendSet,
    seed: u64,
) -> Result<DecodeResult> {
    Decoder::new(backends).best_of_k(ctx, params, guidance, seed)
}

impl Episode<'_> {
    fn backends(&self) -> &BackendSet {
        self.decoder.backends
    }

    fn uses_recall(&self) -> bool {
        self.guidance.is_some_and(|g| g.w < 1.0)
    }

    fn uses_hal(&self) -> bool {
        self.guidance.is_some_and(|g| g.w > 0.0)
    }

    fn run(&mut self, seed: u64) -> Result<DecodeResult> {
        if self.uses_recall() {
            self.backend_calls += 1;
            self.refs = self.backends().reference_objects(&self.ctx.image_ref).map_err(backend(0))?;
            let labels: Vec<String> = self.refs.iter().map(|r| r.canonical.clone()).collect();
            self.embed_missing(labels, 0)?;
        }

        let mut response = PartialResponse::default();
        let mut used_tokens: u32 = 0;
        let mut iterations = Vec::new();
        let termination = loop {
            let iteration = iterations.len();
            if iteration >= self.params.max_iterations as usize {
                break Termination::MaxIterations;
            }
            let remaining = self.params.max_total_tokens - used_tokens;
            let candidates = self.sample_round(&response.text, remaining, iteration)?;
            let record = self.score_round(&response.text, candidates, iteration)?;
            let chosen = &record.candidates[record.selected];
            response.append(chosen);
            used_tokens = used_tokens.saturating_add(chosen.token_count).min(self.params.max_total_tokens);
            iterations.push(record);

            if response.finished {
                break Termination::Eos;
            }
            if used_tokens >= self.params.max_total_tokens || self.params.period.is_infinite() {
                break Termination::MaxTokens;
            }
        };

        Ok(DecodeResult {
            final_text: response.text,
            trace: EpisodeTrace {
                seed,
                iterations,
                total_generated_tokens: self.generated_tokens,
                total_backend_calls: self.backend_calls,
            },
            termination,
        })
    }

    fn request(&mut self, prefix: &str, remaining: u32, seed: SeedStream, iteration: usize) -> Result<Vec<Candidate>> {
        let stop = match self.params.period {
            SentencePeriod::Sentences(t) => Stop::SentenceBoundaries(t),
            SentencePeriod::Infinity => Stop::ToEos,
        };
        let req = GenerateRequest::new(
            &self.ctx.image_ref,
            &self.ctx.instruction,
            prefix,
            self.params.k,
            self.params.temperature,
            stop,
            remaining,
            seed.seed(),
        );
        self.backend_calls += 1;
        let resp = self.backends().generator.generate(&req).map_err(backend(iteration))?;
        if resp.candidates.is_empty() {
            return Err(Error::EmptyCandidates { iteration });
        }
        self.generated_tokens += resp.candidates.iter().map(|c| u64::from(c.token_count)).sum::<u64>();
        Ok(resp
            .candidates
            .into_iter()
            .map(|c| self.enforce_limits(c.into(), remaining))
            .collect())
    }

    /// Cuts a candidate at the sentence period and the token cap when the
    /// generator overshoots either.
    fn enforce_limits(&self, mut c: Candidate, remaining: u32) -> Candidate {
        if let SentencePeriod::Sentences(t) = self.params.period {
            let split = truncate_after_boundaries(&c.text, t as usize);
            let kept = split.chunk.len();
            if kept < c.text.len() {
                if !split.remainder.trim().is_empty() {
                    let scaled = (u64::from(c.token_count) * kept as u64).div_ceil(c.text.len() as u64);
                    c.token_count = scaled.max(1) as u32;
                    c.finished = false;
                }
                c.text.truncate(kept);
            }
        }
        if c.token_count > remaining {
            c.text = truncate_words(&c.text, remaining as usize).to_string();
            c.token_count = remaining;
            c.finished = false;
        }
        c
    }

    fn sample_round(&mut self, prefix: &str, remaining: u32, iteration: usize) -> Result<Vec<Candidate>> {
        let stream = self.root.split(iteration as u64);
        let candidates = self.request(prefix, remaining, stream, iteration)?;
        if !candidates.iter().all(Candidate::is_degenerate) {
            return Ok(candidates);
        }
        let candidates = self.request(prefix, remaining, stream.split(RETRY_STREAM), iteration)?;
        if candidates.iter().all(Candidate::is_degenerate) {
            return Err(Error::DegenerateCandidates { iteration });
        }
        Ok(candidates)
    }

    fn embed_missing(&mut self, labels: Vec<String>, iteration: usize) -> Result<()> {
        let mut missing: Vec<String> = labels
            .into_iter()
            .filter(|l| !self.embeddings.contains_key(l))
            .collect();
        missing.sort();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        self.backend_calls += 1;
        let vectors = self.backends().embedder.embed(&missing).map_err(backend(iteration))?;
        if vectors.len() != missing.len() {
            return Err(Error::Backend {
                iteration,
                source: BackendError::Schema(format!("{} vectors for {} labels", vectors.len(), missing.len())),
            });
        }
        self.embeddings.extend(missing.into_iter().zip(vectors));
        Ok(())
    }

    fn score_round(&mut self, prefix: &str, candidates: Vec<Candidate>, iteration: usize) -> Result<IterationRecord> {
        let Some(guidance) = self.guidance else {
            let n = candidates.len();
            return Ok(IterationRecord {
                iteration,
                candidates,
                r_hal_raw: None,
                r_hal: None,
                r_rec: None,
                combined: vec![0.0; n],
                selected: 0,
            });
        };
        let backends = self.decoder.backends;
        let full: Vec<String> = candidates.iter().map(|c| format!("{prefix}{}", c.text)).collect();

        let r_rec = if self.uses_recall() {
            let preds: Vec<Vec<ObjectMention>> =
                full.iter().map(|t| backends.extractor.extract(t)).collect();
            if !self.refs.is_empty() {
                let labels = preds.iter().flatten().map(|m| m.canonical.clone()).collect();
                self.embed_missing(labels, iteration)?;
            }
            let (refs, embeddings) = (&self.refs, &self.embeddings);
            let scores = par::map(self.decoder.execution, &preds, |_, p| {
                recall_reward(refs, p, embeddings, guidance.tau)
            });
            Some(scores.into_iter().collect::<Result<Vec<_>>>()?)
        } else {
            None
        };

        let r_hal_raw = if self.uses_hal() {
            self.backend_calls += candidates.len() as u64;
            let ctx = self.ctx;
            let scored = par::map(self.decoder.execution, &candidates, |i, c| {
                let response = match guidance.hal_scope {
                    HalScope::FullPrefix => full[i].as_str(),
                    HalScope::LastChunk => c.text.as_str(),
                };
                backends.scorer.score(&ScoreRequest::new(&ctx.image_ref, &ctx.instruction, response))
            });
            let scores = scored.into_iter().collect::<std::result::Result<Vec<_>, _>>().map_err(backend(iteration))?;
            if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::Backend {
                    iteration,
                    source: BackendError::Schema(format!("score {bad} outside [0, 1]")),
                });
            }
            Some(scores)
        } else {
            None
        };

        let (r_hal_raw, r_hal) = match (r_hal_raw, guidance.hal_normalization) {
            (Some(raw), HalNormalization::Minmax) => {
                let norm = minmax_normalize(&raw, DEFAULT_MINMAX_EPSILON);
                (Some(raw), Some(norm))
            }
            (raw, _) => (None, raw),
        };

        let combined = (0..candidates.len())
            .map(|i| {
                let h = r_hal.as_ref().map_or(0.0, |v| v[i]);
                let r = r_rec.as_ref().map_or(0.0, |v| v[i]);
                combine_scores(h, r, guidance.w)
            })
            .collect::<Result<Vec<_>>>()?;
        let selected = select_best(&combined)?;
        Ok(IterationRecord {
            iteration,
            candidates,
            r_hal_raw,
            r_hal,
            r_rec,
            combined,
            selected,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_best_examples() {
        assert_eq!(select_best(&[0.2, 0.9, 0.9]).unwrap(), 1);
        assert_eq!(select_best(&[0.5]).unwrap(), 0);
        assert_eq!(select_best(&[0.3, 0.3, 0.3]).unwrap(), 0);
        assert!(matches!(select_best(&[]), Err(Error::EmptyCandidates { .. })));
    }

    #[test]
    fn partial_response_concatenates() {
        let mut p = PartialResponse::default();
        p.append(&Candidate { text: "A cat.".into(), finished: false, token_count: 2 });
        p.append(&Candidate { text: " It naps.".into(), finished: true, token_count: 3 });
        assert_eq!(p.text, "A cat. It naps.");
        assert_eq!(p.chunks_selected, 2);
        assert!(p.finished);
    }
}
