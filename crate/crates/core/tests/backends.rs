use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use mrgd::backends::fixture::{AnnotationFile, EmbeddingTable, FixtureTree, ScoreTable};
use mrgd::backends::protocol::{
    DetectRequest, DetectResponse, EmbedRequest, EmbedResponse, GenerateRequest, GenerateResponse,
    ScoreRequest, ScoreResponse, Stop,
};
use mrgd::backends::remote::{decode_reply, RemoteBackend};
use mrgd::backends::sim::SimWorld;
use mrgd::backends::{
    build_backends, BackendError, Detector, Embedder, Generator, HalScorer, Needs,
};
use mrgd::{EngineConfig, SeedStream};
use rand::Rng;
use serde_json::{json, Value};

type Log = Arc<Mutex<Vec<(String, Value)>>>;

/// Minimal HTTP/1.1 server answering each POST via `reply(path, body)`.
fn serve<F>(reply: F) -> (String, Log)
where
    F: Fn(&str, &Value) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log: Log = Arc::default();
    let seen = log.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, text) = reply(&path, &body);
            seen.lock().unwrap().push((path, body));
            let response = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}"), log)
}

fn gen_request(k: u32, stop: Stop) -> GenerateRequest {
    GenerateRequest::new("img-1", "Describe this image in detail", "", k, 1.0, stop, 64, 11)
}

#[test]
fn remote_round_trips() {
    let (url, log) = serve(|path, body| {
        let reply = match path {
            "/v1/generate" => {
                let n = body["num_samples"].as_u64().unwrap();
                let candidates: Vec<Value> = (0..n)
                    .map(|i| json!({"text": format!("Thing {i}."), "finished": body["stop"] == "to_eos", "token_count": 3}))
                    .collect();
                json!({"version": "mrgd/1", "candidates": candidates})
            }
            "/v1/score" => json!({"version": "mrgd/1", "score": 0.25}),
            "/v1/detect" => json!({"version": "mrgd/1", "detections": [{"label": "cat", "confidence": 0.9}]}),
            "/v1/embed" => {
                let n = body["labels"].as_array().unwrap().len();
                let vectors: Vec<Value> = (0..n).map(|i| json!((0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>())).collect();
                json!({"version": "mrgd/1", "vectors": vectors})
            }
            _ => return (404, "not found".into()),
        };
        (200, reply.to_string())
    });
    let remote = RemoteBackend::new(&url);

    let resp = remote.generate(&gen_request(2, Stop::SentenceBoundaries(1))).unwrap();
    assert_eq!(resp.candidates.len(), 2);
    assert!(resp.candidates.iter().all(|c| c.text.ends_with('.') && !c.finished));
    let resp = remote.generate(&gen_request(1, Stop::ToEos)).unwrap();
    assert!(resp.candidates[0].finished);

    assert_eq!(remote.score(&ScoreRequest::new("img-1", "q", "A cat.")).unwrap(), 0.25);
    assert_eq!(remote.detect("img-1").unwrap()[0].label, "cat");
    let v = remote.embed(&["cat".into(), "dog".into()]).unwrap();
    assert_eq!(v[0].dot(&v[1]).unwrap(), 0.0);

    let log = log.lock().unwrap();
    assert_eq!(log.len(), 5);
    assert!(log.iter().all(|(_, body)| body["version"] == "mrgd/1"));
    assert_eq!(log[0].1["stop"], json!({"sentence_boundaries": 1}));
    assert_eq!(log[1].1["stop"], json!("to_eos"));
    assert_eq!(log[0].1["seed"], json!(11));
}

#[test]
fn remote_rejects_bad_replies() {
    let (url, _) = serve(|path, _| match path {
        "/v1/generate" => (200, r#"{"version":"mrgd/1","candidates":[{"text":"A cat.","token_count":3}]}"#.into()),
        "/v1/score" => (200, r#"{"version":"mrgd/1","score":1.7}"#.into()),
        "/v1/detect" => (500, r#"{"version":"mrgd/1","error":"model not loaded"}"#.into()),
        _ => (200, r#"{"version":"mrgd/1","vectors":[[0.3,0.3]]}"#.into()),
    });
    let remote = RemoteBackend::new(&url);
    let err = remote.generate(&gen_request(1, Stop::SentenceBoundaries(1))).unwrap_err();
    assert!(matches!(err, BackendError::Schema(_)), "{err:?}");
    let err = remote.score(&ScoreRequest::new("i", "q", "x")).unwrap_err();
    assert!(matches!(err, BackendError::Schema(_)), "{err:?}");
    assert_eq!(remote.detect("i").unwrap_err(), BackendError::ServiceReported("model not loaded".into()));
    let err = remote.embed(&["cat".into()]).unwrap_err();
    assert!(matches!(err, BackendError::Schema(_)), "{err:?}");
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let remote = RemoteBackend::new(&format!("http://127.0.0.1:{port}"));
    let err = remote.score(&ScoreRequest::new("i", "q", "x")).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}

fn outcome(kind: &str, request: &Value, response: &Value) -> Result<(), BackendError> {
    let body = response.to_string();
    fn roundtrip<T: serde::Serialize + serde::de::DeserializeOwned>(v: &Value) -> T {
        let typed: T = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(&serde_json::to_value(&typed).unwrap(), v, "field names must round-trip");
        typed
    }
    match kind {
        "generate" => {
            let req: GenerateRequest = roundtrip(request);
            req.validate()?;
            decode_reply::<GenerateResponse>(200, &body)?.validate(&req)
        }
        "score" => {
            let req: ScoreRequest = roundtrip(request);
            req.validate()?;
            decode_reply::<ScoreResponse>(200, &body)?.validate()
        }
        "detect" => {
            let req: DetectRequest = roundtrip(request);
            req.validate()?;
            decode_reply::<DetectResponse>(200, &body)?.validate()
        }
        "embed" => {
            let req: EmbedRequest = roundtrip(request);
            req.validate()?;
            decode_reply::<EmbedResponse>(200, &body)?.validate(&req)
        }
        other => panic!("unknown vector kind {other}"),
    }
}

#[test]
fn conformance_vectors() {
    let vectors: Vec<Value> =
        serde_json::from_str(include_str!("vectors/protocol.json")).unwrap();
    assert!(vectors.len() >= 16);
    for v in &vectors {
        let name = v["name"].as_str().unwrap();
        let got = match outcome(v["kind"].as_str().unwrap(), &v["request"], &v["response"]) {
            Ok(()) => "ok".to_string(),
            Err(BackendError::Schema(_)) => "SCHEMA".into(),
            Err(BackendError::ServiceReported(_)) => "SERVICE_REPORTED".into(),
            Err(e) => format!("{e:?}"),
        };
        assert_eq!(got, v["expect"].as_str().unwrap(), "vector {name:?}");
    }
}

#[test]
fn sim_truth_rate_converges() {
    let world = SimWorld::default();
    let mut hits = 0;
    let mut draws = 0;
    for i in 0..100 {
        let image = format!("img-{i}");
        let episode = world.episode(&image);
        let req = GenerateRequest::new(&image, "q", "", 100, 1.0, Stop::SentenceBoundaries(1), 64, i);
        for c in world.generate(&req).unwrap().candidates {
            let label = c.text.trim_end_matches('.').rsplit(' ').next().unwrap().to_string();
            hits += usize::from(episode.ground_truth.contains(&label));
            draws += 1;
        }
    }
    assert_eq!(draws, 10_000);
    let rate = hits as f64 / draws as f64;
    assert!((rate - 0.6).abs() <= 0.02, "rate {rate}");
}

#[test]
fn sim_replays_seeded_stream() {
    let world = SimWorld::default().with_truth_rate(0.6);
    let episode = world.episode("img-1");
    let req = GenerateRequest::new("img-1", "q", "", 3, 1.0, Stop::SentenceBoundaries(1), 64, 7);
    let got: Vec<String> = world.generate(&req).unwrap().candidates.into_iter().map(|c| c.text).collect();

    // replay: sample j draws from child stream j of the request seed
    let expected: Vec<String> = (0..3)
        .map(|j| {
            let mut rng = SeedStream::new(7).split(j).rng();
            let label = if rng.random::<f64>() < 0.6 {
                &episode.ground_truth[rng.random_range(0..episode.ground_truth.len())]
            } else {
                &episode.distractors[rng.random_range(0..episode.distractors.len())]
            };
            format!("There is a {label}.")
        })
        .collect();
    assert_eq!(got, expected);
    assert_eq!(world.generate(&req).unwrap(), world.generate(&req).unwrap());
}

#[test]
fn fixture_files_and_backend_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("tree.json"), r#"{"nodes": {"": [{"text": "A cat.", "score": 0.9}, {"text": "A dog.", "score": 0.4}], "A cat.": ["<EOS>"], "A dog.": ["<EOS>"]}}"#).unwrap();
    std::fs::write(p("scores.json"), r#"{"scores": {"A cat.": 0.7}}"#).unwrap();
    std::fs::write(p("lexicon.txt"), "cat: kitten\ndog\nmat\n").unwrap();
    std::fs::write(p("annotations.json"), r#"{"lexicon": "lexicon.txt", "images": {"img-1": ["cat", "mat"], "img-2": []}}"#).unwrap();
    std::fs::write(p("embeddings.txt"), "cat 1 0 0\ndog 0 1 0\nmat 0 0 1\n").unwrap();

    let tree = FixtureTree::load(p("tree.json")).unwrap();
    assert_eq!(tree.score(&ScoreRequest::new("i", "q", "A dog.")).unwrap(), 0.4);
    let table = ScoreTable::load(p("scores.json")).unwrap();
    assert_eq!(table.score(&ScoreRequest::new("i", "q", "A cat.")).unwrap(), 0.7);
    let from_tree = ScoreTable::load(p("tree.json")).unwrap();
    assert_eq!(from_tree.score(&ScoreRequest::new("i", "q", "A cat.")).unwrap(), 0.9);
    let ann = AnnotationFile::load(p("annotations.json")).unwrap();
    assert_eq!(ann.lexicon_path().unwrap(), p("lexicon.txt"));
    assert!(ann.detect("img-2").unwrap().is_empty());
    assert_eq!(EmbeddingTable::load(p("embeddings.txt")).unwrap().len(), 3);

    let spec = |name: &str| Some(format!("fixture:{}", p(name).display()));
    let cfg = EngineConfig {
        backend_generate: spec("tree.json"),
        backend_score: spec("tree.json"),
        backend_detect: spec("annotations.json"),
        backend_embed: spec("embeddings.txt"),
        ..EngineConfig::default()
    };
    let needs = Needs { generator: true, scorer: true, recall: true };
    let set = build_backends(&cfg, needs).unwrap();
    let refs: Vec<String> = set.reference_objects("img-1").unwrap().into_iter().map(|m| m.canonical).collect();
    assert_eq!(refs, ["cat", "mat"]);
    let mentions = set.extractor.extract("Two kittens near a dog.");
    let labels: Vec<&str> = mentions.iter().map(|m| m.canonical.as_str()).collect();
    assert_eq!(labels, ["cat", "dog"]);

    let missing = EngineConfig { backend_detect: None, ..cfg.clone() };
    assert!(build_backends(&missing, needs).err().unwrap().is_config_error());
    let bad = EngineConfig { backend_generate: spec("nope.json"), ..cfg };
    assert!(build_backends(&bad, needs).is_err());
}

#[test]
fn sim_world_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.json");
    std::fs::write(&path, r#"{"truth_rate": 0.9, "seed": 5}"#).unwrap();
    let world = SimWorld::load(&path).unwrap();
    assert_eq!(world.truth_rate, 0.9);
    assert_eq!(world.vocabulary.len(), 24);
    std::fs::write(&path, r#"{"truth_rate": 2.0}"#).unwrap();
    assert!(SimWorld::load(&path).is_err());
    std::fs::write(&path, r#"{"truth": 0.5}"#).unwrap();
    assert!(SimWorld::load(&path).is_err());

    let cfg = EngineConfig {
        backend_generate: Some("sim:default".into()),
        backend_score: Some(format!("sim:{}", dir.path().join("missing.json").display())),
        ..EngineConfig::default()
    };
    assert!(build_backends(&cfg, Needs { generator: true, scorer: false, recall: false }).is_err());
    let cfg = EngineConfig { backend_score: Some("sim:default".into()), ..cfg };
    let set = build_backends(&cfg, Needs { generator: true, scorer: true, recall: false }).unwrap();
    assert_eq!(set.scorer.score(&ScoreRequest::new("img", "q", "Nothing.")).unwrap(), 1.0);
}
