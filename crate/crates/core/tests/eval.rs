use std::sync::Arc;

use mrgd::backends::fixture::{AnnotationFile, EmbeddingTable, FixtureTree};
use mrgd::backends::sim::SimWorld;
use mrgd::backends::BackendSet;
use mrgd::eval::{
    chair_instance, chair_sentence, csv_string, emit_csv, evaluate_captions, read_captions,
    recall_metric, run_baseline, run_benchmark, run_sweep, write_captions, AnnotationRecord,
    Benchmark, CaptionRecord, MetricsCounts, MetricsReport, SweepGrid, CSV_HEADER,
};
use mrgd::extraction::{Lexicon, MentionExtractor};
use mrgd::par::Execution;
use mrgd::{Error, GenerationParams, GuidanceConfig, SentencePeriod, VisualContext};
use proptest::prelude::*;

const LABELS: [&str; 5] = ["bus", "car", "cat", "dog", "mat"];

const TREE: &str = r#"{"images": {
    "img-1": {"": [
        {"text": "A cat.", "finished": true, "score": 0.9},
        {"text": "A bus on a mat with a cat.", "finished": true, "score": 0.3}
    ]},
    "img-2": {"": [
        {"text": "A dog.", "finished": true, "score": 0.8},
        {"text": "A dog and a car.", "finished": true, "score": 0.1}
    ]}
}}"#;

fn fixture_backends() -> BackendSet {
    let tree = Arc::new(FixtureTree::parse(TREE).unwrap());
    let detector = AnnotationFile::from_labels([("img-1", vec!["cat", "mat"]), ("img-2", vec!["dog"])]);
    BackendSet::new(
        tree.clone(),
        tree,
        Arc::new(detector),
        Arc::new(EmbeddingTable::one_hot(LABELS)),
        Arc::new(Lexicon::from_labels(LABELS).unwrap()),
    )
}

fn fixture_dataset() -> Vec<(VisualContext, AnnotationRecord)> {
    [("img-1", vec!["cat", "mat"]), ("img-2", vec!["dog"])]
        .into_iter()
        .map(|(image, gt)| {
            (VisualContext::new(image, "Describe this image.").unwrap(), AnnotationRecord::new(image, gt))
        })
        .collect()
}

fn params(k: u32, period: SentencePeriod) -> GenerationParams {
    GenerationParams { k, period, ..GenerationParams::default() }
}

fn weight(w: f64) -> GuidanceConfig {
    GuidanceConfig { w, ..GuidanceConfig::default() }
}

fn assert_close(got: f64, want: f64) {
    assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
}

#[test]
fn fixture_benchmark_reports() {
    let backends = fixture_backends();
    let data = fixture_dataset();
    let one = params(2, SentencePeriod::Sentences(1));

    // hallucination only: "A cat." and "A dog."
    let r = run_benchmark(&data, one, weight(1.0), &backends, 0).unwrap();
    assert_close(r.c_instance, 0.0);
    assert_close(r.c_sentence, 0.0);
    assert_close(r.recall, 2.0 / 3.0);
    assert_close(r.avg_length, 2.0);
    assert_eq!(r.captions_evaluated, 2);
    assert_eq!(r.compute_proxy.total_generated_tokens, 3 + 9 + 3 + 6);
    // per image: one generate call and two score calls
    assert_eq!(r.compute_proxy.total_backend_calls, 6);

    // recall only: the long img-1 caption covers both objects, img-2 ties
    let r = run_benchmark(&data, one, weight(0.0), &backends, 0).unwrap();
    assert_close(r.c_instance, 1.0 / 4.0);
    assert_close(r.c_sentence, 1.0 / 2.0);
    assert_close(r.recall, 1.0);
    assert_close(r.avg_length, 5.0);
    assert_eq!(r.compute_proxy.total_generated_tokens, 21);
    // per image: detect, embed references, generate, embed new predictions
    assert_eq!(r.compute_proxy.total_backend_calls, 8);
}

#[test]
fn serial_and_parallel_benchmarks_agree() {
    let backends = fixture_backends();
    let data = fixture_dataset();
    let p = params(2, SentencePeriod::Sentences(1));
    let run = |e| Benchmark::new(&backends).with_execution(e).episodes(&data, p, Some(weight(0.5)), 3).unwrap();
    assert_eq!(run(Execution::Serial), run(Execution::Parallel));
}

fn sim() -> (BackendSet, Vec<(VisualContext, AnnotationRecord)>) {
    let world = SimWorld::default();
    let data = world.dataset(24, "Describe this image in detail.").unwrap();
    (BackendSet::simulated(Arc::new(world)), data)
}

fn metrics_only(r: &MetricsReport) -> [f64; 4] {
    [r.c_instance, r.c_sentence, r.recall, r.avg_length]
}

#[test]
fn single_candidate_matches_baseline() {
    let (backends, data) = sim();
    let p = params(1, SentencePeriod::Sentences(1));
    let guided = run_benchmark(&data, p, weight(0.5), &backends, 9).unwrap();
    let plain = run_baseline(&data, p, &backends, 9).unwrap();
    assert_eq!(metrics_only(&guided), metrics_only(&plain));
    assert_eq!(guided.compute_proxy.total_generated_tokens, plain.compute_proxy.total_generated_tokens);
}

#[test]
fn empty_dataset_is_vacuous() {
    let (backends, _) = sim();
    let r = run_benchmark(&[], params(3, SentencePeriod::Sentences(1)), weight(0.5), &backends, 0).unwrap();
    assert_eq!(r.captions_evaluated, 0);
    assert_eq!(metrics_only(&r), [0.0, 0.0, 1.0, 0.0]);
    assert_eq!(r.compute_proxy.total_backend_calls, 0);
}

#[test]
fn invalid_parameters_are_rejected() {
    let (backends, data) = sim();
    let err = run_benchmark(&data, params(0, SentencePeriod::Sentences(1)), weight(0.5), &backends, 0).unwrap_err();
    assert!(err.is_config_error());
    let err = run_benchmark(&data, params(2, SentencePeriod::Sentences(1)), weight(-0.1), &backends, 0).unwrap_err();
    assert!(err.is_config_error());
}

#[test]
fn sweep_rows_follow_grid_order() {
    let (backends, data) = sim();
    let grid = SweepGrid {
        w: vec![0.0, 1.0],
        k: vec![1, 3, 5],
        period: vec![SentencePeriod::Sentences(1)],
    };
    let mut ticks = Vec::new();
    let rows = run_sweep(&data, &grid, GenerationParams::default(), weight(0.5), &backends, 4, |done, total| {
        ticks.push((done, total))
    })
    .unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(ticks.last(), Some(&(6, 6)));
    let order: Vec<(f64, u32)> = rows.iter().map(|r| (r.w, r.k)).collect();
    assert_eq!(order, [(0.0, 1), (0.0, 3), (0.0, 5), (1.0, 1), (1.0, 3), (1.0, 5)]);

    for pair in rows.chunks(3) {
        let tokens: Vec<u64> = pair.iter().map(|r| r.report.compute_proxy.total_generated_tokens).collect();
        assert!(tokens.windows(2).all(|t| t[0] <= t[1]), "{tokens:?}");
    }

    // each cell equals a standalone benchmark with the same seed
    let p = params(3, SentencePeriod::Sentences(1));
    let alone = run_benchmark(&data, p, weight(1.0), &backends, 4).unwrap();
    assert_eq!(rows[4].report, alone);

    let empty = SweepGrid { w: vec![], ..grid };
    assert!(run_sweep(&data, &empty, GenerationParams::default(), weight(0.5), &backends, 4, |_, _| ()).is_err());
}

#[test]
fn csv_output() {
    let (backends, data) = sim();
    let grid = SweepGrid {
        w: vec![0.5],
        k: vec![2],
        period: vec![SentencePeriod::Sentences(1), SentencePeriod::Infinity],
    };
    let rows = run_sweep(&data, &grid, GenerationParams::default(), weight(0.5), &backends, 1, |_, _| ()).unwrap();
    let text = csv_string(&rows);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[1].starts_with("0.500000,2,1,"));
    assert!(lines[2].starts_with("0.500000,2,inf,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 9));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    emit_csv(&rows, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    assert!(emit_csv(&[], dir.path().join("none.csv")).is_err());
    assert!(!dir.path().join("none.csv").exists());
    let bad = dir.path().join("missing-dir").join("x.csv");
    assert!(matches!(emit_csv(&rows, &bad), Err(Error::Io { .. })));
}

#[test]
fn caption_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("captions.jsonl");
    let records = vec![
        CaptionRecord { image_ref: "a".into(), caption: "A cat.".into() },
        CaptionRecord { image_ref: "b".into(), caption: "Two dogs and a bus.".into() },
    ];
    let mut buf = Vec::new();
    write_captions(&records, &mut buf).unwrap();
    std::fs::write(&path, &buf).unwrap();
    assert_eq!(read_captions(&path).unwrap(), records);

    std::fs::write(&path, "").unwrap();
    assert!(read_captions(&path).unwrap().is_empty());

    let text = String::from_utf8(buf).unwrap();
    std::fs::write(&path, format!("{text}{{\"image_ref\": \"c\"\n")).unwrap();
    match read_captions(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }

    let lexicon = Lexicon::from_labels(LABELS).unwrap();
    let annotations = vec![AnnotationRecord::new("a", ["cat"]), AnnotationRecord::new("b", ["dog"])];
    let r = evaluate_captions(&records, &annotations, &lexicon).unwrap();
    assert_close(r.c_instance, 1.0 / 3.0);
    assert_close(r.c_sentence, 0.5);
    assert_close(r.recall, 1.0);
    assert_close(r.avg_length, 3.5);
    let missing = evaluate_captions(&records, &annotations[..1], &lexicon).unwrap_err();
    assert!(missing.is_config_error());
}

fn caption_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (
        prop::collection::vec(0..LABELS.len(), 0..6),
        prop::collection::vec(0..LABELS.len(), 0..4),
    )
}

fn counts_for(cases: &[(Vec<usize>, Vec<usize>)], lexicon: &Lexicon) -> Vec<MetricsCounts> {
    cases
        .iter()
        .map(|(said, gt)| {
            let caption = said.iter().map(|&i| format!("A {}.", LABELS[i])).collect::<Vec<_>>().join(" ");
            let gt = AnnotationRecord::new("x", gt.iter().map(|&i| LABELS[i]));
            MetricsCounts::caption(&caption, &lexicon.extract(&caption), &gt.ground_truth)
        })
        .collect()
}

proptest! {
    #[test]
    fn metrics_ignore_caption_order(cases in prop::collection::vec(caption_strategy(), 0..12), rot in 0usize..12) {
        let lexicon = Lexicon::from_labels(LABELS).unwrap();
        let mut shuffled = cases.clone();
        if !shuffled.is_empty() {
            let n = rot % shuffled.len();
            shuffled.rotate_left(n);
            shuffled.reverse();
        }
        let a: MetricsCounts = counts_for(&cases, &lexicon).into_iter().sum();
        let b: MetricsCounts = counts_for(&shuffled, &lexicon).into_iter().sum();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn streaming_equals_batch(cases in prop::collection::vec(caption_strategy(), 1..12), cut in 0usize..12) {
        let lexicon = Lexicon::from_labels(LABELS).unwrap();
        let counts = counts_for(&cases, &lexicon);
        let cut = cut.min(counts.len());
        let left: MetricsCounts = counts[..cut].iter().copied().sum();
        let right: MetricsCounts = counts[cut..].iter().copied().sum();
        let batch: MetricsCounts = counts.iter().copied().sum();
        prop_assert_eq!(left.merge(right), batch);
    }

    #[test]
    fn chair_matches_direct_counting(cases in prop::collection::vec(caption_strategy(), 1..12)) {
        let lexicon = Lexicon::from_labels(LABELS).unwrap();
        let prepared: Vec<_> = cases
            .iter()
            .map(|(said, gt)| {
                let caption = said.iter().map(|&i| format!("A {}.", LABELS[i])).collect::<Vec<_>>().join(" ");
                (lexicon.extract(&caption), AnnotationRecord::new("x", gt.iter().map(|&i| LABELS[i])))
            })
            .collect();
        let scored: Vec<_> = prepared.iter().map(|(m, a)| (m.as_slice(), a)).collect();

        // direct count over distinct mentioned labels per caption
        let (mut mentioned, mut wrong, mut bad_caps, mut gt_total, mut covered) = (0, 0, 0, 0, 0);
        for (said, gt) in &cases {
            let said: std::collections::BTreeSet<_> = said.iter().collect();
            let gt: std::collections::BTreeSet<_> = gt.iter().collect();
            let w = said.iter().filter(|s| !gt.contains(*s)).count();
            mentioned += said.len();
            wrong += w;
            bad_caps += usize::from(w > 0);
            gt_total += gt.len();
            covered += gt.iter().filter(|g| said.contains(*g)).count();
        }
        let precision = if mentioned == 0 { 1.0 } else { 1.0 - wrong as f64 / mentioned as f64 };
        prop_assert!((chair_instance(&scored) - (1.0 - precision)).abs() < 1e-12);
        prop_assert!((chair_sentence(&scored) - bad_caps as f64 / cases.len() as f64).abs() < 1e-12);
        let recall = if gt_total == 0 { 1.0 } else { covered as f64 / gt_total as f64 };
        prop_assert!((recall_metric(&scored) - recall).abs() < 1e-12);
    }
}
