//! Deterministic fixture synthesis for offline runs and tests.
//!
//! Everything here is pure arithmetic — no randomness — so fixture graphs,
//! vector files, images, and recorded cassettes are byte-stable across runs
//! and machines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::embedding::{save_vectors, EmbeddingVector, Modality, VectorIndex};
use crate::gateway::{EndpointRole, GatewayError, ModelGateway, ModelRequest, Transport};
use crate::mmkg::{save_graph, Entity, Graph, GraphError, Relation};
use crate::pipeline::{
    answer_query, AnswerRecord, IndexBundle, PipelineConfig, StageArtifacts,
};
use crate::retrieval::image_key;
use crate::scene::MediaResolver;

/// A prompt/media routing rule for scripted transports.
#[derive(Debug, Clone, Default)]
pub struct Route {
    pub role: Option<EndpointRole>,
    pub prompt_contains: Option<String>,
    pub prompt_equals: Option<String>,
    pub media_contains: Option<String>,
    pub response: String,
}

impl Route {
    pub fn new(response: impl Into<String>) -> Self {
        Route {
            response: response.into(),
            ..Route::default()
        }
    }

    pub fn role(mut self, role: EndpointRole) -> Self {
        self.role = Some(role);
        self
    }

    pub fn prompt_contains(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains = Some(needle.into());
        self
    }

    pub fn prompt_equals(mut self, text: impl Into<String>) -> Self {
        self.prompt_equals = Some(text.into());
        self
    }

    pub fn media_contains(mut self, needle: impl Into<String>) -> Self {
        self.media_contains = Some(needle.into());
        self
    }

    fn matches(&self, request: &ModelRequest) -> bool {
        if let Some(role) = self.role {
            if request.role != role {
                return false;
            }
        }
        if let Some(needle) = &self.prompt_contains {
            if !request.prompt.contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(text) = &self.prompt_equals {
            if &request.prompt != text {
                return false;
            }
        }
        if let Some(needle) = &self.media_contains {
            if !request.media.iter().any(|m| m.name.contains(needle.as_str())) {
                return false;
            }
        }
        true
    }
}

/// Deterministic transport answering from the first matching route.
pub struct RouterTransport {
    routes: Vec<Route>,
}

impl RouterTransport {
    pub fn new(routes: Vec<Route>) -> Self {
        RouterTransport { routes }
    }
}

impl Transport for RouterTransport {
    fn send(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        self.routes
            .iter()
            .find(|route| route.matches(request))
            .map(|route| route.response.clone())
            .ok_or_else(|| GatewayError::Transport {
                message: format!(
                    "no route for role {:?}, prompt starts {:?}",
                    request.role,
                    request.prompt.chars().take(60).collect::<String>()
                ),
            })
    }
}

/// Transport that panics the process if touched; proves a code path makes
/// no wire calls.
pub struct FailingTransport;

impl Transport for FailingTransport {
    fn send(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        panic!(
            "network transport invoked in an offline code path (role {:?})",
            request.role
        );
    }
}

fn embedding_body(values: &[f64]) -> String {
    serde_json::json!({ "dim": values.len(), "values": values }).to_string()
}

// ---------------------------------------------------------------------------
// Benchmark-shaped graphs
// ---------------------------------------------------------------------------

const ENTITY_TYPES: [&str; 5] = ["person", "object", "place", "event", "concept"];
const PREDICATES: [&str; 6] = [
    "related_to",
    "part_of",
    "located_in",
    "used_for",
    "knows",
    "derived_from",
];

/// Ring + chord graph with exact node/edge/image counts. The ring keeps it
/// one connected component; chords use a distinct predicate family so no
/// triple collides with a ring edge.
fn shaped_graph(prefix: &str, nodes: usize, edges: usize, images: usize) -> Graph {
    assert!(edges >= nodes, "need at least a full ring");
    let chords = edges - nodes;
    assert!(chords <= nodes, "chord construction supports at most one per node");

    // images = per_node * nodes + extra, extra nodes get one more
    let per_node = images / nodes;
    let extra = images % nodes;

    let mut entities = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let id = format!("{prefix}{i:04}");
        let mut entity = Entity::new(&id, format!("{prefix} entity {i}"));
        entity.entity_type = ENTITY_TYPES[i % ENTITY_TYPES.len()].to_string();
        entity.description = format!("Synthetic {prefix} fixture entity number {i}.");
        let count = per_node + usize::from(i < extra);
        entity.image_refs = (0..count)
            .map(|j| format!("images/{id}_{j}.jpg"))
            .collect();
        entities.push(entity);
    }

    let id = |i: usize| format!("{prefix}{:04}", i % nodes);
    let mut relations = Vec::with_capacity(edges);
    for i in 0..nodes {
        relations.push(Relation::new(
            id(i),
            id(i + 1),
            PREDICATES[i % PREDICATES.len()],
            0.5 + 0.4 * ((i % 10) as f64) / 10.0,
        ));
    }
    for c in 0..chords {
        relations.push(Relation::new(
            id(c),
            id(c + nodes / 2),
            format!("chord_{}", PREDICATES[c % PREDICATES.len()]),
            0.6,
        ));
    }
    Graph::build(entities, relations).expect("shaped fixture is valid")
}

/// Fixture graph shaped like the FVQA 2.0+ manifest: 1,152 nodes, 1,767
/// edges, 3,342 image refs.
pub fn fvqa2plus_graph() -> Graph {
    shaped_graph("fv", 1152, 1767, 3342)
}

/// Fixture graph shaped like the MVQA manifest: 1,271 nodes, 1,468 edges,
/// 4,611 image refs.
pub fn mvqa_graph() -> Graph {
    shaped_graph("mv", 1271, 1468, 4611)
}

// ---------------------------------------------------------------------------
// The movie-still scenario: a man holding a cup, identifiable as Cobb
// ---------------------------------------------------------------------------

pub const MAN_BBOX: [u32; 4] = [100, 80, 300, 460];
pub const CUP_BBOX: [u32; 4] = [260, 200, 330, 280];

pub fn scenario_commonsense_graph() -> Graph {
    let mut cobb = Entity::new("cobb", "Cobb");
    cobb.entity_type = "person".into();
    cobb.description = "Extractor who leads the dream heist team".into();
    cobb.image_refs = vec!["portraits/cobb_0.png".into()];
    let mut robert = Entity::new("robert", "Robert");
    robert.entity_type = "person".into();
    robert.description = "Heir whose mind is the target".into();
    robert.image_refs = vec!["portraits/robert_0.png".into()];
    let mut cup = Entity::new("cup", "cup");
    cup.entity_type = "object".into();
    cup.description = "A small drinking vessel".into();
    cup.image_refs = vec!["portraits/cup_0.png".into()];
    let mut totem = Entity::new("totem", "totem");
    totem.entity_type = "object".into();
    totem.description = "A personal object used to test reality".into();
    let mut noise = Entity::new("noise_node", "warehouse");
    noise.entity_type = "place".into();
    noise.description = "An unrelated location".into();

    Graph::build(
        vec![cobb, robert, cup, totem, noise],
        vec![
            Relation::new("cobb", "robert", "targets", 0.95),
            Relation::new("cobb", "cup", "holding", 0.9),
            Relation::new("robert", "totem", "owns", 0.8),
            Relation::new("robert", "noise_node", "visits", 0.6),
        ],
    )
    .expect("scenario graph is valid")
}

fn unit(values: [f64; 8]) -> EmbeddingVector {
    EmbeddingVector::new(values.to_vec()).expect("finite fixture vector")
}

pub fn scenario_text_index() -> VectorIndex {
    let mut index = VectorIndex::new(8, Modality::Text);
    let pairs = [
        ("cobb", [0.8, 0.0, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0]),
        ("robert", [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ("cup", [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ("totem", [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        ("noise_node", [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
    ];
    for (key, values) in pairs {
        index.insert(key.into(), unit(values)).expect("fixture insert");
    }
    index
}

pub fn scenario_image_index() -> VectorIndex {
    let mut index = VectorIndex::new(8, Modality::Image);
    let pairs = [
        ("cobb", [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        ("robert", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        ("cup", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    ];
    for (key, values) in pairs {
        index
            .insert(image_key(key, 0), unit(values))
            .expect("fixture insert");
    }
    index
}

pub const MAN_CROP_VALUES: [f64; 8] = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
pub const CUP_CROP_VALUES: [f64; 8] = [0.0, 0.0, 0.6, 0.0, 0.0, 0.0, 0.8, 0.0];
pub const MAN_MENTION_VALUES: [f64; 8] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
pub const CUP_MENTION_VALUES: [f64; 8] = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];

// background objects: crops pointing away from every entity vector so they
// never cross the match threshold
pub const WINDOW_BBOX: [u32; 4] = [0, 0, 640, 100];
pub const TABLE_BBOX: [u32; 4] = [0, 300, 640, 480];
pub const LAMP_BBOX: [u32; 4] = [500, 50, 600, 200];
const WINDOW_CROP_VALUES: [f64; 8] = [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
const TABLE_CROP_VALUES: [f64; 8] = [0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
const LAMP_CROP_VALUES: [f64; 8] = [0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0];

fn bbox_needle(bbox: [u32; 4]) -> String {
    format!("bbox=[{},{},{},{}]", bbox[0], bbox[1], bbox[2], bbox[3])
}

pub fn scenario_scene_body() -> String {
    serde_json::json!({
        "entities": [
            {"entity_id": "e1", "name": "man", "category": "person",
             "bbox_px": MAN_BBOX, "confidence": 0.9},
            {"entity_id": "e2", "name": "cup", "category": "object",
             "bbox_px": CUP_BBOX, "confidence": 0.85},
            {"entity_id": "e3", "name": "window", "category": "other",
             "bbox_px": WINDOW_BBOX, "confidence": 0.5},
            {"entity_id": "e4", "name": "table", "category": "object",
             "bbox_px": TABLE_BBOX, "confidence": 0.7},
            {"entity_id": "e5", "name": "lamp", "category": "object",
             "bbox_px": LAMP_BBOX, "confidence": 0.6}
        ],
        "relations": [
            {"subject_id": "e1", "predicate": "holding", "object_id": "e2", "confidence": 0.9},
            {"subject_id": "e4", "predicate": "next_to", "object_id": "e5", "confidence": 0.6},
            {"subject_id": "e2", "predicate": "on", "object_id": "e4", "confidence": 0.5}
        ]
    })
    .to_string()
}

pub fn scenario_keep_lists_body() -> String {
    serde_json::json!({
        "keep_entities": ["e1", "e2"],
        "keep_relations": [{"s": "e1", "p": "holding", "o": "e2"}]
    })
    .to_string()
}

pub fn scenario_prune_action_body() -> String {
    serde_json::json!({
        "analysis": "The warehouse node does not relate to the question.",
        "recommendation": "Prune",
        "nodes_to_expand": [],
        "nodes_to_prune": ["noise_node"],
        "reason": "Remove noise",
        "confidence": 0.8
    })
    .to_string()
}

/// Routes covering every model interaction of the scenario pipeline.
pub fn scenario_routes() -> Vec<Route> {
    vec![
        Route::new(scenario_scene_body())
            .role(EndpointRole::VisionChat)
            .prompt_contains("visual grounding + relation extraction"),
        Route::new(r#"{"entities": ["man", "cup"]}"#)
            .role(EndpointRole::Chat)
            .prompt_contains("entity mention extractor"),
        Route::new(embedding_body(&MAN_MENTION_VALUES))
            .role(EndpointRole::TextEmbed)
            .prompt_equals("man"),
        Route::new(embedding_body(&CUP_MENTION_VALUES))
            .role(EndpointRole::TextEmbed)
            .prompt_equals("cup"),
        Route::new(embedding_body(&MAN_CROP_VALUES))
            .role(EndpointRole::ImageEmbed)
            .media_contains(bbox_needle(MAN_BBOX)),
        Route::new(embedding_body(&CUP_CROP_VALUES))
            .role(EndpointRole::ImageEmbed)
            .media_contains(bbox_needle(CUP_BBOX)),
        Route::new(embedding_body(&WINDOW_CROP_VALUES))
            .role(EndpointRole::ImageEmbed)
            .media_contains(bbox_needle(WINDOW_BBOX)),
        Route::new(embedding_body(&TABLE_CROP_VALUES))
            .role(EndpointRole::ImageEmbed)
            .media_contains(bbox_needle(TABLE_BBOX)),
        Route::new(embedding_body(&LAMP_CROP_VALUES))
            .role(EndpointRole::ImageEmbed)
            .media_contains(bbox_needle(LAMP_BBOX)),
        Route::new(scenario_keep_lists_body())
            .role(EndpointRole::VisionChat)
            .prompt_contains("image-graph entities/relations"),
        Route::new(scenario_prune_action_body())
            .role(EndpointRole::VisionChat)
            .prompt_contains("knowledge graph analysis expert"),
        Route::new("Cobb")
            .role(EndpointRole::VisionChat)
            .prompt_contains("visual question answering assistant"),
        Route::new(r#"{"score": 80}"#)
            .role(EndpointRole::Judge)
            .prompt_contains("grading a visual question answering system"),
        Route::new(r#"{"score": 0.9}"#)
            .role(EndpointRole::Judge)
            .prompt_contains("semantic equivalence"),
    ]
}

/// Writes a deterministic 640x480 PNG.
pub fn write_test_image(path: &Path) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let buffer = image::RgbImage::from_fn(640, 480, |x, y| {
        image::Rgb([(x % 251) as u8, (y % 241) as u8, ((x + y) % 239) as u8])
    });
    buffer
        .save(path)
        .map_err(|e| std::io::Error::other(e.to_string()))
}

/// A fully materialized offline scenario: graph directory, vector files,
/// query image, and a recorded cassette for the given pipeline config.
pub struct ScenarioFixture {
    pub dir: PathBuf,
    pub graph_dir: PathBuf,
    pub image_path: PathBuf,
    pub text_index_path: PathBuf,
    pub image_index_path: PathBuf,
    pub cassette_path: PathBuf,
    pub question: String,
    pub config: PipelineConfig,
    pub graph: Graph,
}

impl ScenarioFixture {
    /// Builds all files under `dir` and records the cassette by running the
    /// pipeline once against the scripted router.
    pub fn build(dir: &Path) -> Result<Self, GraphError> {
        Self::build_with_config(dir, PipelineConfig::default())
    }

    pub fn build_with_config(dir: &Path, config: PipelineConfig) -> Result<Self, GraphError> {
        let graph = scenario_commonsense_graph();
        let graph_dir = dir.join("graph");
        save_graph(&graph, &graph_dir)?;

        let image_path = dir.join("inception_still.png");
        write_test_image(&image_path).map_err(|e| GraphError::Io {
            path: image_path.display().to_string(),
            source: e,
        })?;

        let text_index_path = dir.join("text_vectors.jsonl");
        let image_index_path = dir.join("image_vectors.jsonl");
        save_vectors(&scenario_text_index(), &text_index_path)
            .map_err(|e| GraphError::Index(e.to_string()))?;
        save_vectors(&scenario_image_index(), &image_index_path)
            .map_err(|e| GraphError::Index(e.to_string()))?;

        let fixture = ScenarioFixture {
            dir: dir.to_path_buf(),
            graph_dir,
            image_path,
            text_index_path,
            image_index_path,
            cassette_path: dir.join("cassette.jsonl"),
            question: "Who is the man holding the cup?".to_string(),
            config,
            graph,
        };

        // record every interaction once so replay covers the same run
        let recorder = ModelGateway::record(
            Box::new(RouterTransport::new(scenario_routes())),
            &fixture.cassette_path,
        )
        .map_err(|e| GraphError::Index(e.to_string()))?;
        let (record, _) = fixture.run("fig1", &recorder);
        debug_assert!(record.failure.is_none(), "recording run failed: {:?}", record.failure);
        Ok(fixture)
    }

    pub fn indexes(&self) -> IndexBundle {
        IndexBundle {
            text: crate::embedding::load_vectors(&self.text_index_path, 8, Modality::Text)
                .expect("fixture text vectors load"),
            image: Some(
                crate::embedding::load_vectors(&self.image_index_path, 8, Modality::Image)
                    .expect("fixture image vectors load"),
            ),
        }
    }

    /// Runs the pipeline against this fixture with the given gateway.
    pub fn run(&self, question_id: &str, gateway: &ModelGateway) -> (AnswerRecord, StageArtifacts) {
        let indexes = self.indexes();
        answer_query(
            question_id,
            &self.question,
            &self.image_path.display().to_string(),
            &self.graph,
            &indexes,
            &self.config,
            gateway,
            &MediaResolver::new(),
        )
    }
}

/// Writes a replay dataset of `n` samples over the scenario image and
/// records a cassette covering scene, retrieval, answer, judge, and SAS
/// calls for each sample.
pub struct SmokeEvalFixture {
    pub scenario: ScenarioFixture,
    pub dataset_path: PathBuf,
    pub samples: Vec<crate::evalkit::QASample>,
}

impl SmokeEvalFixture {
    pub fn build(dir: &Path, n: usize) -> Result<Self, GraphError> {
        let scenario = ScenarioFixture::build(dir)?;
        let image = scenario.image_path.display().to_string();
        let samples: Vec<crate::evalkit::QASample> = (0..n)
            .map(|i| crate::evalkit::QASample {
                id: format!("q{i:02}"),
                image: image.clone(),
                question: format!("Sample {i}: who is the man holding the cup?"),
                answer: if i % 2 == 0 { "Cobb" } else { "Robert" }.to_string(),
            })
            .collect();
        let dataset_path = dir.join("dataset.jsonl");
        let mut lines = String::new();
        for sample in &samples {
            lines.push_str(&serde_json::to_string(sample).expect("sample serializes"));
            lines.push('\n');
        }
        std::fs::write(&dataset_path, lines).map_err(|e| GraphError::Io {
            path: dataset_path.display().to_string(),
            source: e,
        })?;

        // record the eval interactions: pipeline per sample + judge + sas
        let recorder = ModelGateway::record(
            Box::new(RouterTransport::new(scenario_routes())),
            &dir.join("eval_cassette.jsonl"),
        )
        .map_err(|e| GraphError::Index(e.to_string()))?;
        let indexes = scenario.indexes();
        let env = crate::evalkit::EvalEnvironment {
            commonsense: &scenario.graph,
            indexes: &indexes,
            config: &scenario.config,
            gateway: &recorder,
            resolver: MediaResolver::new(),
            metrics: crate::evalkit::MetricToggles {
                llm_judge: true,
                sas: true,
            },
            jobs: 1,
        };
        let report = crate::evalkit::eval_run(&samples, &env);
        debug_assert!(report.failures.is_empty(), "{:?}", report.failures);
        Ok(SmokeEvalFixture {
            scenario,
            dataset_path,
            samples,
        })
    }

    pub fn cassette_path(&self) -> PathBuf {
        self.scenario.dir.join("eval_cassette.jsonl")
    }
}

/// Writes a manifest-attachment file mapping entity ids to extra image refs.
pub fn write_enrich_manifest(
    path: &Path,
    refs: &BTreeMap<String, Vec<String>>,
) -> std::io::Result<()> {
    let mut lines = String::new();
    for (id, image_refs) in refs {
        lines.push_str(
            &serde_json::json!({ "id": id, "image_refs": image_refs }).to_string(),
        );
        lines.push('\n');
    }
    std::fs::write(path, lines)
}
