//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::Deserialize;

use kgvip_core::embedding::{
    load_vectors, save_vectors, EmbedPayload, Embedder, Modality, VectorIndex,
};
use kgvip_core::evalkit::{
    aggregate_csv, eval_run_with_cancel, generate_qa, load_dataset, EvalEnvironment, MetricToggles,
};
use kgvip_core::fixtures::FailingTransport;
use kgvip_core::gateway::{HttpTransport, ModelGateway, Transport};
use kgvip_core::mmkg::{
    extract_graph_from_text, giant_component, graph_stats, load_graph, merge_duplicate_entities,
    prune_low_confidence, save_graph, Graph,
};
use kgvip_core::pipeline::{answer_query, IndexBundle, StageArtifacts};
use kgvip_core::retrieval::image_key;
use kgvip_core::scene::{generate_scene_graph, serialize_scene_graph, MediaResolver};

use crate::config::RunConfig;
use crate::CliError;

/// Builds the gateway in the configured cassette mode. Replay mode carries a
/// failing transport stub, so a wire call is a loud bug, not a silent fetch.
fn build_gateway(config: &RunConfig) -> Result<ModelGateway, CliError> {
    let gateway = match (&config.replay, &config.record) {
        (Some(path), _) => ModelGateway::replay(path)?.with_transport(Box::new(FailingTransport)),
        (None, Some(path)) => {
            let transport: Box<dyn Transport> =
                Box::new(HttpTransport::new(config.endpoint_config()));
            ModelGateway::record(transport, path)?
        }
        (None, None) => {
            let transport: Box<dyn Transport> =
                Box::new(HttpTransport::new(config.endpoint_config()));
            ModelGateway::live(transport)
        }
    };
    Ok(gateway
        .with_retry_budget(config.retry_budget)
        .with_in_flight_limit(config.in_flight)
        .with_decoding(config.temperature, config.max_tokens))
}

fn write_run_fingerprint(config: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", config.out.display())))?;
    let path = config.out.join("run.json");
    std::fs::write(&path, config.redacted_json())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn thousands(value: usize) -> String {
    let digits = value.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn stats(config: &RunConfig) -> Result<(), CliError> {
    let dir = config
        .graph
        .as_ref()
        .ok_or_else(|| CliError::Usage("stats needs --graph".into()))?;
    let graph = load_graph(dir)?;
    let stats = graph_stats(&graph);
    println!(
        "{} nodes / {} edges / {} images / {} components",
        thousands(stats.nodes),
        thousands(stats.edges),
        thousands(stats.image_refs),
        thousands(stats.components),
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Document {
    id: String,
    text: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| {
            CliError::Data(format!("{} line {}: {e}", path.display(), line_no + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn ingest(
    config: &RunConfig,
    docs: &Path,
    out_graph: &Path,
    merge_threshold: f64,
    prune_threshold: f64,
    giant_only: bool,
) -> Result<(), CliError> {
    let documents: Vec<Document> = read_jsonl(docs)?;
    let gateway = build_gateway(config)?;

    // extract a fragment per document; first definition of an id wins
    let mut entities = BTreeMap::new();
    let mut relations = Vec::new();
    for document in &documents {
        let fragment = extract_graph_from_text(&document.text, &gateway)
            .map_err(|e| CliError::Gateway(format!("document {}: {e}", document.id)))?;
        for (id, entity) in fragment.entities {
            entities.entry(id).or_insert(entity);
        }
        relations.extend(fragment.relations);
    }
    let relations = relations
        .into_iter()
        .filter(|r| entities.contains_key(&r.source) && entities.contains_key(&r.target))
        .collect();
    let mut graph = Graph::build(entities.into_values().collect(), relations)?;

    // embedding-based dedup over entity labels and descriptions
    let embedder = Embedder::new(&gateway, Modality::Text, Some(config.dim));
    let mut index = VectorIndex::new(config.dim, Modality::Text);
    for entity in graph.entities.values() {
        let payload = EmbedPayload::Text(format!("{}: {}", entity.label, entity.description));
        let vector = embedder.embed(&payload)?;
        index.insert(entity.id.clone(), vector)?;
    }
    graph = merge_duplicate_entities(&graph, &index, merge_threshold)?;
    graph = prune_low_confidence(&graph, prune_threshold);
    if giant_only {
        graph = giant_component(&graph);
    }
    save_graph(&graph, out_graph)?;
    let stats = graph_stats(&graph);
    println!(
        "ingested {} documents -> {} nodes / {} edges",
        documents.len(),
        thousands(stats.nodes),
        thousands(stats.edges),
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Attachment {
    id: String,
    image_refs: Vec<String>,
}

pub fn enrich(
    _config: &RunConfig,
    graph_dir: &Path,
    manifest: &Path,
    out_graph: &Path,
) -> Result<(), CliError> {
    let mut graph = load_graph(graph_dir)?;
    let attachments: Vec<Attachment> = read_jsonl(manifest)?;
    let mut attached = 0;
    let mut unknown = 0;
    for attachment in attachments {
        match graph.entities.get_mut(&attachment.id) {
            Some(entity) => {
                for image_ref in attachment.image_refs {
                    if !entity.image_refs.contains(&image_ref) {
                        entity.image_refs.push(image_ref);
                        attached += 1;
                    }
                }
            }
            None => unknown += 1,
        }
    }
    graph.validate()?;
    save_graph(&graph, out_graph)?;
    println!("attached {attached} image refs ({unknown} unknown entity ids skipped)");
    Ok(())
}

pub fn index(
    config: &RunConfig,
    graph_dir: &Path,
    out_text: Option<&Path>,
    out_image: Option<&Path>,
    media_root: Option<&Path>,
) -> Result<(), CliError> {
    if out_text.is_none() && out_image.is_none() {
        return Err(CliError::Usage(
            "index needs --out-text and/or --out-image".into(),
        ));
    }
    let graph = load_graph(graph_dir)?;
    let gateway = build_gateway(config)?;
    let resolver = match media_root {
        Some(root) => MediaResolver::with_root(root),
        None => MediaResolver::new(),
    };

    if let Some(path) = out_text {
        let embedder = Embedder::new(&gateway, Modality::Text, Some(config.dim));
        let mut index = VectorIndex::new(config.dim, Modality::Text);
        for entity in graph.entities.values() {
            let payload = EmbedPayload::Text(format!("{}: {}", entity.label, entity.description));
            index.insert(entity.id.clone(), embedder.embed(&payload)?)?;
        }
        save_vectors(&index, path)?;
        println!("wrote {} text vectors to {}", index.len(), path.display());
    }

    if let Some(path) = out_image {
        let embedder = Embedder::new(&gateway, Modality::Image, Some(config.dim));
        let mut index = VectorIndex::new(config.dim, Modality::Image);
        let mut skipped = 0;
        for entity in graph.entities.values() {
            for (i, image_ref) in entity.image_refs.iter().enumerate() {
                let bytes = match resolver
                    .resolve(image_ref)
                    .and_then(|p| std::fs::read(&p).map_err(|e| {
                        kgvip_core::scene::SceneError::UnreadableImage {
                            path: p.display().to_string(),
                            message: e.to_string(),
                        }
                    })) {
                    Ok(bytes) => bytes,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                let payload = EmbedPayload::Media {
                    name: image_ref.clone(),
                    bytes,
                };
                index.insert(image_key(&entity.id, i), embedder.embed(&payload)?)?;
            }
        }
        save_vectors(&index, path)?;
        println!(
            "wrote {} image vectors to {} ({skipped} unresolvable refs skipped)",
            index.len(),
            path.display()
        );
    }
    Ok(())
}

pub fn scene(config: &RunConfig, image: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let resolver = MediaResolver::new();
    let reference = image.display().to_string();
    let (width, height) = kgvip_core::scene::image_dimensions(&resolver, &reference)?;
    let gateway = build_gateway(config)?;
    let parsed = generate_scene_graph(&reference, width, height, &gateway)?;
    let json = serialize_scene_graph(&parsed.graph);
    match out {
        Some(path) => std::fs::write(path, &json)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    if parsed.dropped_relations > 0 {
        eprintln!(
            "warning: dropped {} relations with unknown endpoints",
            parsed.dropped_relations
        );
    }
    Ok(())
}

fn load_indexes(config: &RunConfig) -> Result<IndexBundle, CliError> {
    let text_path = config
        .text_index
        .as_ref()
        .ok_or_else(|| CliError::Usage("a text index path is required".into()))?;
    let text = load_vectors(text_path, config.dim, Modality::Text)?;
    let image = match &config.image_index {
        Some(path) => Some(load_vectors(path, config.dim, Modality::Image)?),
        None => None,
    };
    Ok(IndexBundle { text, image })
}

fn persist_artifacts(
    out: &Path,
    artifacts: &StageArtifacts,
) -> Result<Option<String>, CliError> {
    let stage_dir = out.join("stages");
    std::fs::create_dir_all(&stage_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", stage_dir.display())))?;
    let write = |name: &str, content: String| -> Result<(), CliError> {
        std::fs::write(stage_dir.join(name), content)
            .map_err(|e| CliError::Data(format!("cannot write {name}: {e}")))
    };
    if let Some(scene) = &artifacts.scene {
        write("scene.json", serialize_scene_graph(scene))?;
    }
    if let Some(pruned) = &artifacts.pruned_scene {
        write("pruned_scene.json", serialize_scene_graph(pruned))?;
    }
    for (name, graph) in [
        ("text_guided.json", &artifacts.text_guided),
        ("vision_guided.json", &artifacts.vision_guided),
        ("unified_commonsense.json", &artifacts.unified_commonsense),
    ] {
        if let Some(graph) = graph {
            write(name, serde_json::to_string_pretty(graph).expect("graph serializes"))?;
        }
    }
    let mut snapshot = None;
    if let Some(fused) = &artifacts.fused {
        write(
            "fused.json",
            serde_json::to_string_pretty(fused).expect("graph serializes"),
        )?;
        snapshot = Some("stages/fused.json".to_string());
    }
    if let Some(context) = &artifacts.context {
        write("context.txt", context.clone())?;
    }
    if let Some(prompt) = &artifacts.answer_prompt {
        write("answer_prompt.txt", prompt.clone())?;
    }
    Ok(snapshot)
}

pub fn ask(config: &RunConfig, image: &Path, question: &str) -> Result<(), CliError> {
    let graph_dir = config
        .graph
        .as_ref()
        .ok_or_else(|| CliError::Usage("ask needs --graph".into()))?;
    let graph = load_graph(graph_dir)?;
    let indexes = load_indexes(config)?;
    let gateway = build_gateway(config)?;
    write_run_fingerprint(config)?;

    let (mut record, artifacts) = answer_query(
        "cli",
        question,
        &image.display().to_string(),
        &graph,
        &indexes,
        &config.pipeline,
        &gateway,
        &MediaResolver::new(),
    );
    if config.trace {
        record.graph_snapshot = persist_artifacts(&config.out, &artifacts)?;
    }
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(config.out.join("answer.json"), &json)
        .map_err(|e| CliError::Data(format!("cannot write answer.json: {e}")))?;
    println!("{json}");

    match record.failure {
        None => Ok(()),
        Some(failure) => {
            let message = format!("stage {} failed: {}", failure.stage, failure.message);
            match failure.kind {
                kgvip_core::pipeline::FailureKind::Gateway => Err(CliError::Gateway(message)),
                kgvip_core::pipeline::FailureKind::Data => Err(CliError::Data(message)),
            }
        }
    }
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn handle_sigint(_signal: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn install_sigint_handler() {
    // finish in-flight samples and flush the partial report on Ctrl-C
    unsafe {
        libc::signal(
            libc::SIGINT,
            handle_sigint as *const () as libc::sighandler_t,
        );
    }
}

pub fn eval(config: &RunConfig, dataset: &Path, method: &str) -> Result<(), CliError> {
    let graph_dir = config
        .graph
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs --graph".into()))?;
    let samples = load_dataset(dataset)?;
    let graph = load_graph(graph_dir)?;
    let indexes = load_indexes(config)?;
    let gateway = build_gateway(config)?;
    write_run_fingerprint(config)?;
    install_sigint_handler();

    let env = EvalEnvironment {
        commonsense: &graph,
        indexes: &indexes,
        config: &config.pipeline,
        gateway: &gateway,
        resolver: MediaResolver::new(),
        metrics: MetricToggles {
            llm_judge: config.judge,
            sas: config.sas,
        },
        jobs: config.jobs,
    };
    let report = eval_run_with_cancel(&samples, &env, &INTERRUPTED);

    let report_path = config.out.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", report_path.display())))?;
    let csv = aggregate_csv(method, &report);
    std::fs::write(config.out.join("aggregates.csv"), &csv)
        .map_err(|e| CliError::Data(format!("cannot write aggregates.csv: {e}")))?;

    println!(
        "scored {} samples ({} failures); meteor {:.2}{}{}",
        report.samples.len(),
        report.failures.len(),
        report.aggregates.meteor,
        report
            .aggregates
            .llm_j
            .map(|v| format!("; llm_j {v:.2}"))
            .unwrap_or_default(),
        report
            .aggregates
            .sas
            .map(|v| format!("; sas {v:.2}"))
            .unwrap_or_default(),
    );
    if INTERRUPTED.load(Ordering::SeqCst) {
        eprintln!("interrupted: partial report flushed to {}", config.out.display());
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SceneRecord {
    image: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    facts: String,
}

pub fn genqa(config: &RunConfig, scenes: &Path, out: &Path) -> Result<(), CliError> {
    let records: Vec<SceneRecord> = read_jsonl(scenes)?;
    let gateway = build_gateway(config)?;
    let mut lines = String::new();
    let mut total = 0;
    let mut dropped_total = 0;
    for record in &records {
        let (samples, dropped) =
            generate_qa(&record.image, &record.description, &record.facts, &gateway)?;
        dropped_total += dropped;
        for sample in samples {
            lines.push_str(&serde_json::to_string(&sample).expect("sample serializes"));
            lines.push('\n');
            total += 1;
        }
    }
    std::fs::write(out, lines)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "generated {total} QA samples from {} scenes ({dropped_total} pairs dropped)",
        records.len()
    );
    Ok(())
}
