use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use mrgd::backends::fixture::AnnotationFile;
use mrgd::backends::sim::{SimWorld, DEFAULT_WORLD};
use mrgd::backends::{build_backends, BackendSet, Needs, ScoreRequest};
use mrgd::eval::{
    annotation_records, emit_csv, evaluate_captions, read_captions, run_sweep, summarize,
    write_captions, AnnotationRecord, Benchmark, MetricsReport, SweepGrid,
};
use mrgd::extraction::Lexicon;
use mrgd::rewards::{combine_scores, recall_reward};
use mrgd::{
    Decoder, EngineConfig, Error, GenerationParams, GuidanceConfig, Result, VisualContext,
};

use crate::args::{
    BenchArgs, Cli, Command, DatasetArgs, DecodeArgs, EngineArgs, GuidanceArgs, MetricsArgs,
    PromptArgs, ScoreArgs, SimulateArgs, SweepArgs,
};

pub const PRESET_DETAIL: &str = "Describe this image in detail";
pub const PRESET_SHORT: &str = "Describe this image in a few sentences";
const GROUNDING_SUFFIX: &str = ". Provide an accurate and objective description, focusing on \
verifiable visual elements such as colors, textures, shapes, and compositions. Avoid making \
assumptions, inferences, or introducing information not present in the image";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode(a) => decode(a),
        Command::Score(a) => score(a),
        Command::Metrics(a) => metrics(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn preset(name: &str) -> Result<String> {
    match name {
        "detail" => Ok(PRESET_DETAIL.to_string()),
        "short" => Ok(PRESET_SHORT.to_string()),
        "grounded" => Ok(format!("{PRESET_DETAIL}{GROUNDING_SUFFIX}")),
        "grounded-short" => Ok(format!("{PRESET_SHORT}{GROUNDING_SUFFIX}")),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected detail, short, grounded or grounded-short)"
        ))),
    }
}

fn instruction(prompt: &PromptArgs, cfg: &EngineConfig) -> Result<String> {
    match &prompt.instruction {
        Some(text) => Ok(text.clone()),
        None => preset(cfg.preset.as_deref().unwrap_or("detail")),
    }
}

/// Defaults, then the config file, then flags.
fn engine_config(engine: &EngineArgs, guidance: &GuidanceArgs, prompt: &PromptArgs) -> Result<EngineConfig> {
    let file = match &engine.config {
        Some(path) => EngineConfig::load(path).map_err(|e| match e {
            Error::Io { path, message } => Error::Config(format!("{path}: {message}")),
            other => other,
        })?,
        None => EngineConfig::default(),
    };
    let sim = engine.world.as_ref().map(|w| format!("sim:{w}"));
    let role = |flag: &Option<String>| flag.clone().or_else(|| sim.clone());
    let overrides = EngineConfig {
        w: guidance.w,
        tau: engine.tau,
        k: guidance.k,
        period: guidance.period,
        temperature: engine.temperature,
        max_total_tokens: engine.max_total_tokens,
        max_iterations: engine.max_iterations,
        hal_normalization: engine.hal_normalization,
        hal_scope: engine.hal_scope,
        seed: engine.seed,
        backend_generate: role(&engine.backend_generate),
        backend_score: role(&engine.backend_score),
        backend_detect: role(&engine.backend_detect),
        backend_embed: role(&engine.backend_embed),
        lexicon: engine.lexicon.clone(),
        detect_floor: engine.detect_floor,
        preset: prompt.preset.clone(),
    };
    Ok(file.merge(overrides))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.display().to_string(), message: e.to_string() }
}

fn decode(args: DecodeArgs) -> Result<()> {
    let cfg = engine_config(&args.engine, &args.guidance, &args.prompt)?;
    let guidance = cfg.guidance()?;
    let params = cfg.generation()?;
    let ctx = VisualContext::new(args.image, instruction(&args.prompt, &cfg)?)?;
    let backends = build_backends(&cfg, Needs::for_guidance(&guidance, true))?;
    let result = Decoder::new(&backends).decode_episode(&ctx, params, guidance, cfg.seed())?;
    if let Some(path) = &args.trace {
        let mut out = create(path)?;
        result.trace.write_jsonl(&mut out).map_err(io_error(path))?;
    }
    if let Some(path) = &args.out {
        write_json(path, &result)?;
    }
    println!("{}", result.final_text);
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let cfg = engine_config(&args.engine, &args.guidance, &args.prompt)?;
    let guidance = cfg.guidance()?;
    let recall_configured = cfg.backend_detect.is_some() && cfg.backend_embed.is_some();
    let needs = Needs {
        generator: false,
        scorer: guidance.w > 0.0,
        recall: guidance.w < 1.0 || recall_configured,
    };
    let backends = build_backends(&cfg, needs)?;
    let ctx = VisualContext::new(args.image, instruction(&args.prompt, &cfg)?)?;
    let backend_err = |source| Error::Backend { iteration: 0, source };

    let r_hal = if needs.scorer || cfg.backend_score.is_some() {
        let req = ScoreRequest::new(&ctx.image_ref, &ctx.instruction, &args.caption);
        Some(backends.scorer.score(&req).map_err(backend_err)?)
    } else {
        None
    };
    let r_rec = if needs.recall {
        Some(recall_of(&backends, &ctx.image_ref, &args.caption, guidance.tau)?)
    } else {
        None
    };
    let combined = combine_scores(r_hal.unwrap_or(0.0), r_rec.unwrap_or(0.0), guidance.w)?;
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    println!("r_hal: {}", show(r_hal));
    println!("r_rec: {}", show(r_rec));
    println!("combined: {combined:.6}");
    Ok(())
}

fn recall_of(backends: &BackendSet, image_ref: &str, caption: &str, tau: f64) -> Result<f64> {
    let backend_err = |source| Error::Backend { iteration: 0, source };
    let refs = backends.reference_objects(image_ref).map_err(backend_err)?;
    let preds = backends.extractor.extract(caption);
    if refs.is_empty() {
        return recall_reward(&refs, &preds, &BTreeMap::new(), tau);
    }
    let labels: Vec<String> = refs
        .iter()
        .chain(&preds)
        .map(|m| m.canonical.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let vectors = backends.embedder.embed(&labels).map_err(backend_err)?;
    let table: BTreeMap<String, _> = labels.into_iter().zip(vectors).collect();
    recall_reward(&refs, &preds, &table, tau)
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let file = AnnotationFile::load(&args.annotations)?;
    let lexicon = match args.lexicon.or_else(|| file.lexicon_path()) {
        Some(path) => Lexicon::load(path)?,
        None => {
            return Err(Error::Config(
                "metrics needs a lexicon (--lexicon or a lexicon entry in the annotation file)".into(),
            ))
        }
    };
    let annotations = annotation_records(&file, &lexicon);
    let captions = read_captions(&args.captions)?;
    let report = evaluate_captions(&captions, &annotations, &lexicon)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    if let Some(path) = &args.csv {
        let text = format!(
            "c_instance,c_sentence,recall,avg_length,captions_evaluated\n{:.6},{:.6},{:.6},{:.6},{}\n",
            report.c_instance, report.c_sentence, report.recall, report.avg_length, report.captions_evaluated
        );
        std::fs::write(path, text).map_err(io_error(path))?;
    }
    print_report(&report);
    Ok(())
}

fn print_report(report: &MetricsReport) {
    println!("{}", serde_json::to_string_pretty(report).expect("serializable"));
}

fn dataset(
    data: &DatasetArgs,
    engine: &EngineArgs,
    backends: &BackendSet,
    instruction: &str,
) -> Result<Vec<(VisualContext, AnnotationRecord)>> {
    if let Some(path) = &data.dataset {
        let file = AnnotationFile::load(path)?;
        return annotation_records(&file, &*backends.extractor)
            .into_iter()
            .map(|ann| Ok((VisualContext::new(ann.image_ref.clone(), instruction)?, ann)))
            .collect();
    }
    match engine.world.as_deref() {
        Some(DEFAULT_WORLD) => SimWorld::default().dataset(data.episodes, instruction),
        Some(path) => SimWorld::load(path)?.dataset(data.episodes, instruction),
        None => Err(Error::Config("no dataset: pass --dataset or --world".into())),
    }
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = engine_config(&args.engine, &args.guidance, &args.prompt)?;
    let guidance = cfg.guidance()?;
    let params = cfg.generation()?;
    let needs = if args.baseline {
        Needs { generator: true, scorer: false, recall: false }
    } else {
        Needs::for_guidance(&guidance, true)
    };
    let backends = build_backends(&cfg, needs)?;
    let data = dataset(&args.data, &args.engine, &backends, &instruction(&args.prompt, &cfg)?)?;
    let outcomes = Benchmark::new(&backends).episodes(
        &data,
        params,
        (!args.baseline).then_some(guidance),
        cfg.seed(),
    )?;
    let report = summarize(&outcomes);
    if let Some(path) = &args.captions {
        let records: Vec<_> = outcomes.iter().map(|o| o.caption()).collect();
        write_captions(&records, create(path)?).map_err(io_error(path))?;
    }
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    print_report(&report);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = engine_config(&args.engine, &GuidanceArgs::default(), &args.prompt)?;
    let base_guidance = cfg.guidance()?;
    let base_params = cfg.generation()?;
    let grid = SweepGrid {
        w: if args.w.is_empty() { vec![base_guidance.w] } else { args.w.clone() },
        k: if args.k.is_empty() { vec![base_params.k] } else { args.k.clone() },
        period: if args.period.is_empty() { vec![base_params.period] } else { args.period.clone() },
    };
    for (w, k, period) in grid.cells() {
        GenerationParams { k, period, ..base_params }.validate()?;
        GuidanceConfig { w, ..base_guidance }.validate()?;
    }
    let needs = Needs {
        generator: true,
        scorer: grid.w.iter().any(|&w| w > 0.0),
        recall: grid.w.iter().any(|&w| w < 1.0),
    };
    let backends = build_backends(&cfg, needs)?;
    let data = dataset(&args.data, &args.engine, &backends, &instruction(&args.prompt, &cfg)?)?;
    let rows = run_sweep(&data, &grid, base_params, base_guidance, &backends, cfg.seed(), |done, total| {
        eprintln!("sweep: {done}/{total} cells");
    })?;
    emit_csv(&rows, &args.out)?;
    eprintln!("sweep: wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let world = match &args.world {
        Some(path) => SimWorld::load(path)?,
        None => SimWorld::default(),
    };
    let images: BTreeMap<String, Vec<String>> = (0..args.episodes)
        .map(|i| {
            let image_ref = format!("sim-{i:05}");
            let gt = world.episode(&image_ref).ground_truth;
            (image_ref, gt)
        })
        .collect();
    write_json(&args.out, &serde_json::json!({ "images": images }))?;
    if let Some(path) = &args.world_out {
        write_json(path, &world)?;
    }
    println!("wrote {} simulated images to {}", images.len(), args.out.display());
    Ok(())
}
