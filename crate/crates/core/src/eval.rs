//! Corpus metrics, benchmark runs and parameter sweeps.
//!
//! * `c_instance`: hallucinated mentions over all mentions (0 with none).
//! * `c_sentence`: captions with at least one hallucinated mention over all
//!   captions.
//! * `recall`: ground-truth objects mentioned over all ground-truth objects
//!   (1 when there are none).
//!
//! All three are micro-averaged over the corpus, so they are ratios of
//! summed [`MetricsCounts`].

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::fixture::AnnotationFile;
use crate::backends::BackendSet;
use crate::config::{GenerationParams, GuidanceConfig, SentencePeriod, VisualContext};
use crate::decoder::{DecodeResult, Decoder};
use crate::error::{Error, Result};
use crate::extraction::MentionExtractor;
use crate::par::{self, Execution};
use crate::rewards::ObjectMention;
use crate::rng::SeedStream;
use crate::segmenter::word_count;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_ref: String,
    pub ground_truth: BTreeSet<String>,
}

impl AnnotationRecord {
    pub fn new<I, S>(image_ref: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AnnotationRecord {
            image_ref: image_ref.into(),
            ground_truth: labels.into_iter().map(Into::into).collect(),
        }
    }
}

/// Ground truth from an annotation file, labels folded to canonical form.
pub fn annotation_records(file: &AnnotationFile, extractor: &dyn MentionExtractor) -> Vec<AnnotationRecord> {
    file.images()
        .map(|(image, dets)| {
            let labels = dets.iter().map(|d| {
                extractor
                    .canonicalize(&d.label)
                    .unwrap_or_else(|| d.label.trim().to_lowercase())
            });
            AnnotationRecord::new(image, labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_ref: String,
    pub caption: String,
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_captions<W: Write>(records: &[CaptionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Summable per-caption counts behind every corpus metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsCounts {
    pub captions: u64,
    pub captions_with_hallucination: u64,
    pub mentions: u64,
    pub hallucinated: u64,
    pub gt_objects: u64,
    pub gt_covered: u64,
    pub words: u64,
}

impl MetricsCounts {
    /// Counts for one caption. Mentions are deduplicated by canonical label.
    pub fn caption(caption: &str, mentions: &[ObjectMention], gt: &BTreeSet<String>) -> Self {
        let mentioned: BTreeSet<&str> = mentions.iter().map(|m| m.canonical.as_str()).collect();
        let hallucinated = mentioned.iter().filter(|m| !gt.contains(**m)).count() as u64;
        let covered = gt.iter().filter(|g| mentioned.contains(g.as_str())).count() as u64;
        MetricsCounts {
            captions: 1,
            captions_with_hallucination: u64::from(hallucinated > 0),
            mentions: mentioned.len() as u64,
            hallucinated,
            gt_objects: gt.len() as u64,
            gt_covered: covered,
            words: word_count(caption) as u64,
        }
    }

    pub fn merge(self, other: MetricsCounts) -> MetricsCounts {
        MetricsCounts {
            captions: self.captions + other.captions,
            captions_with_hallucination: self.captions_with_hallucination + other.captions_with_hallucination,
            mentions: self.mentions + other.mentions,
            hallucinated: self.hallucinated + other.hallucinated,
            gt_objects: self.gt_objects + other.gt_objects,
            gt_covered: self.gt_covered + other.gt_covered,
            words: self.words + other.words,
        }
    }

    pub fn c_instance(&self) -> f64 {
        ratio(self.hallucinated, self.mentions, 0.0)
    }

    pub fn c_sentence(&self) -> f64 {
        ratio(self.captions_with_hallucination, self.captions, 0.0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.gt_covered, self.gt_objects, 1.0)
    }

    pub fn avg_length(&self) -> f64 {
        ratio(self.words, self.captions, 0.0)
    }
}

impl std::iter::Sum for MetricsCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(MetricsCounts::default(), MetricsCounts::merge)
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeProxy {
    pub total_generated_tokens: u64,
    pub total_backend_calls: u64,
}

impl ComputeProxy {
    fn merge(self, other: ComputeProxy) -> ComputeProxy {
        ComputeProxy {
            total_generated_tokens: self.total_generated_tokens + other.total_generated_tokens,
            total_backend_calls: self.total_backend_calls + other.total_backend_calls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub c_instance: f64,
    pub c_sentence: f64,
    pub recall: f64,
    pub avg_length: f64,
    pub captions_evaluated: u64,
    pub compute_proxy: ComputeProxy,
}

impl MetricsReport {
    pub fn from_counts(counts: MetricsCounts, compute_proxy: ComputeProxy) -> Self {
        MetricsReport {
            c_instance: counts.c_instance(),
            c_sentence: counts.c_sentence(),
            recall: counts.recall(),
            avg_length: counts.avg_length(),
            captions_evaluated: counts.captions,
            compute_proxy,
        }
    }
}

/// One caption's mentions paired with its ground truth.
pub type Scored<'a> = (&'a [ObjectMention], &'a AnnotationRecord);

fn counts_of(captions: &[Scored<'_>]) -> MetricsCounts {
    captions
        .iter()
        .map(|(m, ann)| MetricsCounts::caption("", m, &ann.ground_truth))
        .sum()
}

pub fn chair_instance(captions: &[Scored<'_>]) -> f64 {
    counts_of(captions).c_instance()
}

pub fn chair_sentence(captions: &[Scored<'_>]) -> f64 {
    counts_of(captions).c_sentence()
}

pub fn recall_metric(captions: &[Scored<'_>]) -> f64 {
    counts_of(captions).recall()
}

/// Metrics for existing captions. Every caption needs an annotation.
pub fn evaluate_captions(
    captions: &[CaptionRecord],
    annotations: &[AnnotationRecord],
    extractor: &dyn MentionExtractor,
) -> Result<MetricsReport> {
    let by_image: HashMap<&str, &AnnotationRecord> =
        annotations.iter().map(|a| (a.image_ref.as_str(), a)).collect();
    let counts = captions
        .iter()
        .map(|c| {
            let ann = by_image
                .get(c.image_ref.as_str())
                .ok_or_else(|| Error::Config(format!("no annotation for image {:?}", c.image_ref)))?;
            Ok(MetricsCounts::caption(&c.caption, &extractor.extract(&c.caption), &ann.ground_truth))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_counts(counts.into_iter().sum(), ComputeProxy::default()))
}

/// Result of decoding one dataset example.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub image_ref: String,
    pub result: DecodeResult,
    pub counts: MetricsCounts,
}

impl EpisodeOutcome {
    pub fn caption(&self) -> CaptionRecord {
        CaptionRecord {
            image_ref: self.image_ref.clone(),
            caption: self.result.final_text.clone(),
        }
    }
}

pub fn summarize(outcomes: &[EpisodeOutcome]) -> MetricsReport {
    let counts = outcomes.iter().map(|o| o.counts).sum();
    let proxy = outcomes
        .iter()
        .map(|o| ComputeProxy {
            total_generated_tokens: o.result.trace.total_generated_tokens,
            total_backend_calls: o.result.trace.total_backend_calls,
        })
        .fold(ComputeProxy::default(), ComputeProxy::merge);
    MetricsReport::from_counts(counts, proxy)
}

/// Seed used for the `index`-th example of a dataset.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    SeedStream::new(seed).split(index as u64).seed()
}

/// Decodes a dataset with guided decoding, or plain sampling when
/// `guidance` is `None`.
#[derive(Clone, Copy)]
pub struct Benchmark<'a> {
    pub backends: &'a BackendSet,
    pub execution: Execution,
}

impl<'a> Benchmark<'a> {
    pub fn new(backends: &'a BackendSet) -> Self {
        Benchmark {
            backends,
            execution: Execution::default(),
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn episodes(
        &self,
        dataset: &[(VisualContext, AnnotationRecord)],
        params: GenerationParams,
        guidance: Option<GuidanceConfig>,
        seed: u64,
    ) -> Result<Vec<EpisodeOutcome>> {
        let decoder = Decoder::new(self.backends).with_execution(self.execution);
        let extractor = &self.backends.extractor;
        par::map(self.execution, dataset, |i, (ctx, ann)| {
            let episode_seed = episode_seed(seed, i);
            let result = match guidance {
                Some(g) => decoder.decode_episode(ctx, params, g, episode_seed),
                None => decoder.sample_unguided(ctx, params, episode_seed),
            }
            .map_err(|e| Error::Episode {
                image_ref: ctx.image_ref.clone(),
                source: Box::new(e),
            })?;
            let mentions = extractor.extract(&result.final_text);
            let counts = MetricsCounts::caption(&result.final_text, &mentions, &ann.ground_truth);
            Ok(EpisodeOutcome {
                image_ref: ctx.image_ref.clone(),
                result,
                counts,
            })
        })
        .into_iter()
        .collect()
    }

    pub fn run(
        &self,
        dataset: &[(VisualContext, AnnotationRecord)],
        params: GenerationParams,
        guidance: GuidanceConfig,
        seed: u64,
    ) -> Result<MetricsReport> {
        Ok(summarize(&self.episodes(dataset, params, Some(guidance), seed)?))
    }

    pub fn baseline(
        &self,
        dataset: &[(VisualContext, AnnotationRecord)],
        params: GenerationParams,
        seed: u64,
    ) -> Result<MetricsReport> {
        Ok(summarize(&self.episodes(dataset, params, None, seed)?))
    }
}

pub fn run_benchmark(
    dataset: &[(VisualContext, AnnotationRecord)],
    params: GenerationParams,
    guidance: GuidanceConfig,
    backends: &BackendSet,
    seed: u64,
) -> Result<MetricsReport> {
    Benchmark::new(backends).run(dataset, params, guidance, seed)
}

/// Unguided sampling over the dataset, seeded like [`run_benchmark`].
pub fn run_baseline(
    dataset: &[(VisualContext, AnnotationRecord)],
    params: GenerationParams,
    backends: &BackendSet,
    seed: u64,
) -> Result<MetricsReport> {
    Benchmark::new(backends).baseline(dataset, params, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub w: Vec<f64>,
    pub k: Vec<u32>,
    #[serde(rename = "T")]
    pub period: Vec<SentencePeriod>,
}

impl SweepGrid {
    /// Cells in row order: `w` outermost, then `k`, then `T`.
    pub fn cells(&self) -> Vec<(f64, u32, SentencePeriod)> {
        let mut out = Vec::with_capacity(self.len());
        for &w in &self.w {
            for &k in &self.k {
                for &t in &self.period {
                    out.push((w, k, t));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.w.len() * self.k.len() * self.period.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f64,
    pub k: u32,
    #[serde(rename = "T")]
    pub period: SentencePeriod,
    pub report: MetricsReport,
}

/// One benchmark per grid cell. Every cell reuses the same seed, so cells
/// differ only in their parameters. `progress` is called after each cell
/// with (cells done, total).
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    dataset: &[(VisualContext, AnnotationRecord)],
    grid: &SweepGrid,
    params: GenerationParams,
    guidance: GuidanceConfig,
    backends: &BackendSet,
    seed: u64,
    mut progress: impl FnMut(usize, usize),
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid has no cells".into()));
    }
    let bench = Benchmark::new(backends);
    let cells = grid.cells();
    let mut rows = Vec::with_capacity(cells.len());
    for (i, (w, k, period)) in cells.iter().copied().enumerate() {
        let params = GenerationParams { k, period, ..params };
        let guidance = GuidanceConfig { w, ..guidance };
        let report = bench.run(dataset, params, guidance, seed)?;
        rows.push(SweepRow { w, k, period, report });
        progress(i + 1, cells.len());
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "w,k,T,c_instance,c_sentence,recall,avg_length,total_generated_tokens,total_backend_calls";

pub fn csv_string(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.w,
            r.k,
            r.period,
            m.c_instance,
            m.c_sentence,
            m.recall,
            m.avg_length,
            m.compute_proxy.total_generated_tokens,
            m.compute_proxy.total_backend_calls
        );
    }
    out
}

/// Writes the sweep CSV. A partially written file is removed on error.
pub fn emit_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(Error::Config("no sweep rows to write".into()));
    }
    std::fs::write(path, csv_string(rows)).map_err(|e| {
        let _ = std::fs::remove_file(path);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(labels: &[&str]) -> AnnotationRecord {
        AnnotationRecord::new("img", labels.iter().copied())
    }

    fn mentions(labels: &[&str]) -> Vec<ObjectMention> {
        labels.iter().map(|l| ObjectMention::canonical(*l)).collect()
    }

    #[test]
    fn chair_instance_examples() {
        let (m, a) = (mentions(&["cat", "dog"]), ann(&["cat"]));
        assert_eq!(chair_instance(&[(&m, &a)]), 0.5);
        let m = mentions(&["cat"]);
        assert_eq!(chair_instance(&[(&m, &a)]), 0.0);
        let m = mentions(&[]);
        assert_eq!(chair_instance(&[(&m, &a)]), 0.0);
    }

    #[test]
    fn chair_sentence_examples() {
        let a = ann(&["cat"]);
        let clean = mentions(&["cat"]);
        let bad = mentions(&["dog"]);
        let four = [(&clean[..], &a), (&bad[..], &a), (&clean[..], &a), (&clean[..], &a)];
        assert_eq!(chair_sentence(&four), 0.25);
        assert_eq!(chair_sentence(&[(&clean[..], &a)]), 0.0);
        assert_eq!(chair_sentence(&[(&bad[..], &a), (&bad[..], &a)]), 1.0);
    }

    #[test]
    fn recall_examples() {
        let a = ann(&["cat", "dog", "car"]);
        let m = mentions(&["cat"]);
        assert!((recall_metric(&[(&m, &a)]) - 1.0 / 3.0).abs() < 1e-12);
        let m = mentions(&["cat", "dog", "car", "tree"]);
        assert_eq!(recall_metric(&[(&m, &a)]), 1.0);
        let empty = ann(&[]);
        assert_eq!(recall_metric(&[(&m, &empty)]), 1.0);
    }

    #[test]
    fn empty_corpus_is_vacuous() {
        let r = summarize(&[]);
        assert_eq!((r.c_instance, r.c_sentence, r.recall, r.captions_evaluated), (0.0, 0.0, 1.0, 0));
    }

    #[test]
    fn sweep_cells_order() {
        let grid = SweepGrid {
            w: vec![0.0, 0.5, 1.0],
            k: vec![1, 5],
            period: vec![SentencePeriod::Sentences(1)],
        };
        let cells = grid.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], (0.0, 5, SentencePeriod::Sentences(1)));
        assert_eq!(cells[2], (0.5, 1, SentencePeriod::Sentences(1)));
    }

    #[test]
    fn csv_format() {
        let report = MetricsReport::from_counts(
            MetricsCounts { captions: 3, captions_with_hallucination: 1, mentions: 4, hallucinated: 1, gt_objects: 6, gt_covered: 3, words: 20 },
            ComputeProxy { total_generated_tokens: 100, total_backend_calls: 12 },
        );
        let rows = [SweepRow { w: 0.5, k: 5, period: SentencePeriod::Infinity, report }];
        assert_eq!(
            csv_string(&rows),
            format!("{CSV_HEADER}\n0.500000,5,inf,0.250000,0.333333,0.500000,6.666667,100,12\n")
        );
    }
}
