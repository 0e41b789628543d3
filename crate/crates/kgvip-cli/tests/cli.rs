//! End-to-end tests of the `kgvip` binary: exit codes, output shapes, and
//! network-free replay across subcommands.

use std::path::Path;
use std::process::{Command, Output};

use kgvip_core::embedding::{EmbedPayload, Embedder, Modality};
use kgvip_core::fixtures::{
    fvqa2plus_graph, mvqa_graph, scenario_routes, write_enrich_manifest, Route, RouterTransport,
    ScenarioFixture, SmokeEvalFixture,
};
use kgvip_core::gateway::{EndpointRole, ModelGateway};
use kgvip_core::mmkg::{extract_graph_from_text, load_graph, save_graph};

fn kgvip(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut command = Command::new(env!("CARGO_BIN_EXE_kgvip"));
    command.args(args);
    for (key, value) in envs {
        command.env(key, value);
    }
    command.output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

#[test]
fn stats_prints_manifest_counts() {
    let dir = tempfile::tempdir().unwrap();
    let fvqa = dir.path().join("fvqa2plus");
    save_graph(&fvqa2plus_graph(), &fvqa).unwrap();
    let output = kgvip(&["stats", "--graph", fvqa.to_str().unwrap()], &[]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(
        text.contains("1,152 nodes / 1,767 edges / 3,342 images"),
        "{text}"
    );

    let mvqa = dir.path().join("mvqa");
    save_graph(&mvqa_graph(), &mvqa).unwrap();
    let output = kgvip(&["stats", "--graph", mvqa.to_str().unwrap()], &[]);
    assert!(output.status.success());
    assert!(stdout(&output).contains("1,271 nodes / 1,468 edges / 4,611 images"));
}

#[test]
fn stats_rejects_manifest_mismatch_with_data_exit() {
    let dir = tempfile::tempdir().unwrap();
    let graph_dir = dir.path().join("graph");
    save_graph(&kgvip_core::fixtures::scenario_commonsense_graph(), &graph_dir).unwrap();
    std::fs::write(
        graph_dir.join("manifest.json"),
        r#"{"nodes": 999, "edges": 4}"#,
    )
    .unwrap();
    let output = kgvip(&["stats", "--graph", graph_dir.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("manifest mismatch"));
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let output = kgvip(&["frobnicate"], &[]);
    assert_eq!(output.status.code(), Some(1));
    let text = format!("{}{}", stdout(&output), stderr(&output));
    assert!(text.contains("Usage") || text.contains("usage"), "{text}");
}

#[test]
fn ask_replay_digest_miss_exits_3_and_prints_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = ScenarioFixture::build(dir.path()).unwrap();
    let missing = dir.path().join("missing.jsonl");
    std::fs::write(&missing, "").unwrap();

    let output = kgvip(
        &[
            "ask",
            "--graph",
            fixture.graph_dir.to_str().unwrap(),
            "--text-index",
            fixture.text_index_path.to_str().unwrap(),
            "--image-index",
            fixture.image_index_path.to_str().unwrap(),
            "--image",
            fixture.image_path.to_str().unwrap(),
            "--question",
            &fixture.question,
            "--replay",
            missing.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(output.status.code(), Some(3), "{}", stderr(&output));
    let text = format!("{}{}", stdout(&output), stderr(&output));
    assert!(text.contains("digest"), "{text}");
}

#[test]
fn ask_replay_answers_cobb_and_persists_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = ScenarioFixture::build(dir.path()).unwrap();
    let out = dir.path().join("out");

    let output = kgvip(
        &[
            "ask",
            "--graph",
            fixture.graph_dir.to_str().unwrap(),
            "--text-index",
            fixture.text_index_path.to_str().unwrap(),
            "--image-index",
            fixture.image_index_path.to_str().unwrap(),
            "--image",
            fixture.image_path.to_str().unwrap(),
            "--question",
            &fixture.question,
            "--replay",
            fixture.cassette_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--trace",
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("\"answer\": \"Cobb\""));

    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("answer.json")).unwrap()).unwrap();
    assert_eq!(record["answer"], "Cobb");
    assert_eq!(record["graph_snapshot"], "stages/fused.json");
    for artifact in [
        "stages/scene.json",
        "stages/pruned_scene.json",
        "stages/text_guided.json",
        "stages/fused.json",
        "stages/context.txt",
        "run.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn eval_of_an_empty_dataset_exits_0_with_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = ScenarioFixture::build(dir.path()).unwrap();
    let dataset = dir.path().join("empty.jsonl");
    std::fs::write(&dataset, "").unwrap();
    let out = dir.path().join("out");

    let output = kgvip(
        &[
            "eval",
            "--dataset",
            dataset.to_str().unwrap(),
            "--graph",
            fixture.graph_dir.to_str().unwrap(),
            "--text-index",
            fixture.text_index_path.to_str().unwrap(),
            "--image-index",
            fixture.image_index_path.to_str().unwrap(),
            "--replay",
            fixture.cassette_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 0);
    assert_eq!(report["aggregates"]["scored"], 0);
}

#[test]
fn eval_replay_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = SmokeEvalFixture::build(dir.path(), 4).unwrap();
    let out = dir.path().join("out");

    let output = kgvip(
        &[
            "eval",
            "--dataset",
            smoke.dataset_path.to_str().unwrap(),
            "--graph",
            smoke.scenario.graph_dir.to_str().unwrap(),
            "--text-index",
            smoke.scenario.text_index_path.to_str().unwrap(),
            "--image-index",
            smoke.scenario.image_index_path.to_str().unwrap(),
            "--replay",
            smoke.cassette_path().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--judge",
            "--sas",
            "--jobs",
            "2",
        ],
        &[("KGVIP_JOBS", "7")], // the flag must beat the environment
    );
    assert!(output.status.success(), "{}", stderr(&output));

    let csv = std::fs::read_to_string(out.join("aggregates.csv")).unwrap();
    assert!(csv.starts_with("method,llm_j,meteor,sas\n"), "{csv}");
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["jobs"], 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 4);
    assert_eq!(report["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn scene_replay_writes_valid_json() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = ScenarioFixture::build(dir.path()).unwrap();
    let out = dir.path().join("scene.json");

    let output = kgvip(
        &[
            "scene",
            "--image",
            fixture.image_path.to_str().unwrap(),
            "--replay",
            fixture.cassette_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(value["entities"].as_array().unwrap().len(), 5);
}

#[test]
fn genqa_replay_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("qa.jsonl");
    let body = serde_json::json!({
        "qa_pairs": [{"Question": "Who leads the heist?", "Answer": "Cobb leads it."}]
    })
    .to_string();
    let routes = vec![Route::new(body).role(EndpointRole::VisionChat)];
    {
        let recorder =
            ModelGateway::record(Box::new(RouterTransport::new(routes)), &cassette).unwrap();
        kgvip_core::evalkit::generate_qa("still_7.png", "A man in a vest.", "(cobb, role, extractor)", &recorder)
            .unwrap();
    }

    let scenes = dir.path().join("scenes.jsonl");
    std::fs::write(
        &scenes,
        r#"{"image": "still_7.png", "description": "A man in a vest.", "facts": "(cobb, role, extractor)"}
"#,
    )
    .unwrap();
    let out = dir.path().join("dataset.jsonl");
    let output = kgvip(
        &[
            "genqa",
            "--scenes",
            scenes.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--replay",
            cassette.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let dataset = std::fs::read_to_string(&out).unwrap();
    assert_eq!(dataset.lines().count(), 1);
    assert!(dataset.contains("Cobb leads it."));
}

#[test]
fn enrich_attaches_manifest_refs() {
    let dir = tempfile::tempdir().unwrap();
    let graph_dir = dir.path().join("graph");
    save_graph(&kgvip_core::fixtures::scenario_commonsense_graph(), &graph_dir).unwrap();

    let manifest = dir.path().join("attach.jsonl");
    let refs = [(
        "totem".to_string(),
        vec!["portraits/totem_0.png".to_string()],
    )]
    .into_iter()
    .collect();
    write_enrich_manifest(&manifest, &refs).unwrap();

    let out_graph = dir.path().join("enriched");
    let output = kgvip(
        &[
            "enrich",
            "--graph",
            graph_dir.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out-graph",
            out_graph.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let enriched = load_graph(&out_graph).unwrap();
    assert_eq!(
        enriched.entities["totem"].image_refs,
        vec!["portraits/totem_0.png"]
    );
}

fn record_ingest_cassette(path: &Path, document: &str) {
    let fragment_body = serde_json::json!({
        "entities": [
            {"id": "cobb", "label": "Cobb", "type": "person", "description": "Dream thief."},
            {"id": "dom_cobb", "label": "Dom Cobb", "type": "person", "description": "The extractor, also called Cobb."},
            {"id": "mal", "label": "Mal", "type": "person", "description": "His late wife."}
        ],
        "relations": [
            {"source": "cobb", "target": "mal", "predicate": "married_to", "confidence": 0.9},
            {"source": "dom_cobb", "target": "mal", "predicate": "haunted_by", "confidence": 0.2}
        ]
    })
    .to_string();
    let embed = |values: [f64; 4]| serde_json::json!({"dim": 4, "values": values}).to_string();
    let routes = vec![
        Route::new(fragment_body).role(EndpointRole::Chat),
        Route::new(embed([1.0, 0.0, 0.0, 0.0]))
            .role(EndpointRole::TextEmbed)
            .prompt_contains("Cobb:"),
        Route::new(embed([1.0, 0.0, 0.0, 0.0]))
            .role(EndpointRole::TextEmbed)
            .prompt_contains("Dom Cobb:"),
        Route::new(embed([0.0, 1.0, 0.0, 0.0]))
            .role(EndpointRole::TextEmbed)
            .prompt_contains("Mal:"),
    ];
    let recorder = ModelGateway::record(Box::new(RouterTransport::new(routes)), path).unwrap();
    // mirror the ingest flow so the digests line up with the CLI's requests
    let fragment = extract_graph_from_text(document, &recorder).unwrap();
    let embedder = Embedder::new(&recorder, Modality::Text, Some(4));
    for entity in fragment.entities.values() {
        embedder
            .embed(&EmbedPayload::Text(format!(
                "{}: {}",
                entity.label, entity.description
            )))
            .unwrap();
    }
}

#[test]
fn ingest_replay_builds_a_merged_pruned_giant_graph() {
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("ingest.jsonl");
    let document = "Cobb, also known as Dom Cobb, was married to Mal.";
    record_ingest_cassette(&cassette, document);

    let docs = dir.path().join("docs.jsonl");
    std::fs::write(
        &docs,
        serde_json::json!({"id": "d1", "text": document}).to_string() + "\n",
    )
    .unwrap();
    let out_graph = dir.path().join("built");

    let output = kgvip(
        &[
            "ingest",
            "--docs",
            docs.to_str().unwrap(),
            "--out-graph",
            out_graph.to_str().unwrap(),
            "--merge-threshold",
            "0.95",
            "--prune-threshold",
            "0.5",
            "--dim",
            "4",
            "--replay",
            cassette.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let graph = load_graph(&out_graph).unwrap();
    // cobb and dom_cobb merged (identical vectors); the 0.2-confidence edge
    // pruned; mal stays connected through married_to
    assert_eq!(graph.node_count(), 2);
    assert_eq!(graph.edge_count(), 1);
    assert!(graph.contains("cobb"));
    assert!(graph.contains("mal"));
}

#[test]
fn index_replay_writes_text_vectors_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let graph_dir = dir.path().join("graph");
    let graph = kgvip_core::fixtures::scenario_commonsense_graph();
    save_graph(&graph, &graph_dir).unwrap();

    // record one text-embed response per entity, keyed by the exact
    // "{label}: {description}" payloads the index command sends
    let cassette = dir.path().join("index.jsonl");
    {
        let routes = vec![Route::new(r#"{"dim": 4, "values": [1.0, 0.0, 0.0, 0.0]}"#)
            .role(EndpointRole::TextEmbed)];
        let recorder =
            ModelGateway::record(Box::new(RouterTransport::new(routes)), &cassette).unwrap();
        let embedder = Embedder::new(&recorder, Modality::Text, Some(4));
        for entity in graph.entities.values() {
            embedder
                .embed(&EmbedPayload::Text(format!(
                    "{}: {}",
                    entity.label, entity.description
                )))
                .unwrap();
        }
    }

    let out_text = dir.path().join("text_vectors.jsonl");
    let output = kgvip(
        &[
            "index",
            "--graph",
            graph_dir.to_str().unwrap(),
            "--out-text",
            out_text.to_str().unwrap(),
            "--dim",
            "4",
            "--replay",
            cassette.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let index =
        kgvip_core::embedding::load_vectors(&out_text, 4, Modality::Text).unwrap();
    assert_eq!(index.len(), graph.node_count());
}

#[test]
fn verbose_prints_redacted_config() {
    let dir = tempfile::tempdir().unwrap();
    let graph_dir = dir.path().join("graph");
    save_graph(&kgvip_core::fixtures::scenario_commonsense_graph(), &graph_dir).unwrap();
    let output = kgvip(
        &["--verbose", "stats", "--graph", graph_dir.to_str().unwrap()],
        &[("KGVIP_API_KEY", "super-secret-key")],
    );
    assert!(output.status.success());
    let err = stderr(&output);
    assert!(err.contains("<redacted>"), "{err}");
    assert!(!err.contains("super-secret-key"));
}

#[test]
fn config_file_fills_gaps_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = SmokeEvalFixture::build(dir.path(), 2).unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, "jobs = 3\nalpha = 0.5\n").unwrap();
    let out = dir.path().join("out");

    let output = kgvip(
        &[
            "--config",
            config_path.to_str().unwrap(),
            "eval",
            "--dataset",
            smoke.dataset_path.to_str().unwrap(),
            "--graph",
            smoke.scenario.graph_dir.to_str().unwrap(),
            "--text-index",
            smoke.scenario.text_index_path.to_str().unwrap(),
            "--image-index",
            smoke.scenario.image_index_path.to_str().unwrap(),
            "--replay",
            smoke.cassette_path().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success(), "{}", stderr(&output));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["jobs"], 3, "file value fills the unset flag");
}

#[test]
fn routes_cover_all_scenario_roles() {
    // sanity: the shared scenario routes answer every role the pipeline uses
    let roles: Vec<EndpointRole> = scenario_routes().iter().filter_map(|r| r.role).collect();
    for role in [
        EndpointRole::Chat,
        EndpointRole::VisionChat,
        EndpointRole::TextEmbed,
        EndpointRole::ImageEmbed,
        EndpointRole::Judge,
    ] {
        assert!(roles.contains(&role), "{role:?}");
    }
}
