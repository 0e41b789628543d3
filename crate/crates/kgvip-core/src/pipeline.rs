//! End-to-end orchestration: scene parsing → two-stage retrieval → fusion →
//! refinement → answer generation for one (question, image) pair.
//!
//! A stage's hard error does not panic the run: it is recorded on the
//! answer record with the stage name and the partial artifacts are retained.
//! With replay cassettes the whole pipeline is a pure function of its inputs.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, IndexError, Modality, VectorIndex};
use crate::fusion::{fuse, match_entities, serialize_unified, FusionContext, FusionError, UnifiedGraph};
use crate::gateway::{templates, EndpointRole, GatewayError, MediaPart, ModelGateway};
use crate::mmkg::{Graph, Provenance, SubgraphRef};
use crate::refinement::{refine, RefinementTrace};
use crate::retrieval::{
    prune_scene_graph, prune_scene_graph_with_context, text_guided_subgraph, unify_commonsense,
    vision_retrieve, RetrievalConfig, RetrievalError, VisionMode,
};
use crate::scene::{generate_scene_graph, MediaResolver, SceneError, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningMode {
    /// Prune the scene graph against the text-guided commonsense subgraph.
    Graph,
    /// Prune against the raw query text instead.
    Query,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub pruning: PruningMode,
    pub fusion: bool,
    pub refinement: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            pruning: PruningMode::Graph,
            fusion: true,
            refinement: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    /// Weight of the cross-modal term in the alignment score.
    pub alpha: f64,
    /// Minimum alignment score for a match.
    pub tau: f64,
    /// Refinement step bound t.
    pub refine_steps: usize,
    pub toggles: Toggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieval: RetrievalConfig::default(),
            alpha: 0.5,
            tau: 0.45,
            refine_steps: 1,
            toggles: Toggles::default(),
        }
    }
}

/// The vector indexes a pipeline run reads. The image index is only needed
/// in v2v mode.
#[derive(Debug)]
pub struct IndexBundle {
    pub text: VectorIndex,
    pub image: Option<VectorIndex>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Gateway,
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WarningCounters {
    pub scene_dropped_relations: u32,
    pub prune_unknown_keeps: u32,
    pub prune_fallback: u32,
    pub skipped_crops: u32,
    pub refinement_warnings: u32,
}

/// The persisted outcome of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub question: String,
    pub image_ref: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_snapshot: Option<String>,
    pub trace: RefinementTrace,
    pub timings: Vec<StageTiming>,
    pub total_millis: f64,
    pub warnings: WarningCounters,
}

impl AnswerRecord {
    /// JSON with wall-clock fields stripped; byte-identical across replays
    /// of the same inputs.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.timings = Vec::new();
        copy.total_millis = 0.0;
        serde_json::to_string_pretty(&copy).expect("record serializes")
    }
}

/// Intermediate artifacts of one run, for tracing and invariant checks.
#[derive(Debug, Default)]
pub struct StageArtifacts {
    pub scene: Option<SceneGraph>,
    pub pruned_scene: Option<SceneGraph>,
    pub seeds: BTreeSet<String>,
    pub text_guided: Option<Graph>,
    pub vision_guided: Option<Graph>,
    pub unified_commonsense: Option<Graph>,
    pub fused: Option<UnifiedGraph>,
    pub context: Option<String>,
    pub answer_prompt: Option<String>,
}

/// What generation sees: the fused graph, or the two isolated subgraphs when
/// fusion is off.
pub enum ContextSource<'a> {
    Fused(&'a UnifiedGraph),
    Isolated {
        scene: &'a SceneGraph,
        commonsense: &'a Graph,
    },
}

fn scene_as_unified(scene: &SceneGraph) -> UnifiedGraph {
    let empty = Graph::empty();
    let subgraph = SubgraphRef::empty(&empty, Provenance::Adhoc);
    fuse(scene, &subgraph, &[]).expect("scene-only fusion cannot fail")
}

fn commonsense_as_unified(graph: &Graph) -> UnifiedGraph {
    let nodes: BTreeSet<String> = graph.entities.keys().cloned().collect();
    let subgraph = crate::mmkg::induced_subgraph(graph, &nodes)
        .expect("own node set is valid");
    fuse(&SceneGraph::empty(1, 1), &subgraph, &[]).expect("commonsense-only fusion cannot fail")
}

/// Deterministic context text. Fused mode is one NODES/EDGES block; isolated
/// mode emits labeled SCENE GRAPH and COMMONSENSE GRAPH sections.
pub fn serialize_context(source: &ContextSource<'_>) -> String {
    match source {
        ContextSource::Fused(graph) => serialize_unified(graph),
        ContextSource::Isolated { scene, commonsense } => {
            format!(
                "SCENE GRAPH:\n{}COMMONSENSE GRAPH:\n{}",
                serialize_unified(&scene_as_unified(scene)),
                serialize_unified(&commonsense_as_unified(commonsense)),
            )
        }
    }
}

fn context_is_empty(source: &ContextSource<'_>) -> bool {
    match source {
        ContextSource::Fused(graph) => graph.is_empty() && graph.edges.is_empty(),
        ContextSource::Isolated { scene, commonsense } => {
            scene.entities.is_empty()
                && scene.relations.is_empty()
                && commonsense.node_count() == 0
        }
    }
}

fn scene_failure_kind(error: &SceneError) -> FailureKind {
    match error {
        SceneError::Gateway(_) => FailureKind::Gateway,
        _ => FailureKind::Data,
    }
}

fn index_failure_kind(error: &IndexError) -> FailureKind {
    match error {
        IndexError::Gateway(_) => FailureKind::Gateway,
        _ => FailureKind::Data,
    }
}

fn retrieval_failure_kind(error: &RetrievalError) -> FailureKind {
    match error {
        RetrievalError::Gateway(_) => FailureKind::Gateway,
        RetrievalError::Index(inner) => index_failure_kind(inner),
        RetrievalError::Scene(inner) => scene_failure_kind(inner),
        _ => FailureKind::Data,
    }
}

fn fusion_failure_kind(error: &FusionError) -> FailureKind {
    match error {
        FusionError::Index(inner) => index_failure_kind(inner),
        FusionError::Scene(inner) => scene_failure_kind(inner),
        _ => FailureKind::Data,
    }
}

struct StageClock {
    timings: Vec<StageTiming>,
}

impl StageClock {
    fn new() -> Self {
        StageClock {
            timings: Vec::new(),
        }
    }

    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let value = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: start.elapsed().as_secs_f64() * 1000.0,
        });
        value
    }
}

/// Runs the full pipeline for one query. Never panics on stage errors:
/// failures land on the record with the failing stage named and the partial
/// artifacts retained.
#[allow(clippy::too_many_arguments)]
pub fn answer_query(
    question_id: &str,
    question: &str,
    image_ref: &str,
    commonsense: &Graph,
    indexes: &IndexBundle,
    config: &PipelineConfig,
    gateway: &ModelGateway,
    resolver: &MediaResolver,
) -> (AnswerRecord, StageArtifacts) {
    let total_start = Instant::now();
    let mut clock = StageClock::new();
    let mut artifacts = StageArtifacts::default();
    let mut warnings = WarningCounters::default();
    let mut record = AnswerRecord {
        question_id: question_id.to_string(),
        question: question.to_string(),
        image_ref: image_ref.to_string(),
        answer: String::new(),
        failure: None,
        graph_snapshot: None,
        trace: RefinementTrace::default(),
        timings: Vec::new(),
        total_millis: 0.0,
        warnings,
    };

    macro_rules! fail {
        ($stage:expr, $kind:expr, $error:expr) => {{
            record.failure = Some(StageFailure {
                stage: $stage.to_string(),
                message: $error.to_string(),
                kind: $kind,
            });
            record.timings = clock.timings;
            record.total_millis = total_start.elapsed().as_secs_f64() * 1000.0;
            record.warnings = warnings;
            return (record, artifacts);
        }};
    }

    // scene generation
    let scene = clock.run("scene", || -> Result<SceneGraph, SceneError> {
        let (width, height) = crate::scene::image_dimensions(resolver, image_ref)?;
        let parsed = generate_scene_graph(image_ref, width, height, gateway)?;
        warnings.scene_dropped_relations += parsed.dropped_relations as u32;
        Ok(parsed.graph)
    });
    let scene = match scene {
        Ok(scene) => scene,
        Err(e) => {
            let kind = scene_failure_kind(&e);
            fail!("scene", kind, e)
        }
    };
    artifacts.scene = Some(scene.clone());

    // stage 1: text-guided retrieval
    let text_embedder = Embedder::new(gateway, Modality::Text, Some(indexes.text.dim()));
    let text_stage = clock.run("text_retrieval", || {
        text_guided_subgraph(
            commonsense,
            question,
            &config.retrieval,
            &indexes.text,
            &text_embedder,
            gateway,
        )
    });
    let text_stage = match text_stage {
        Ok(stage) => stage,
        Err(e) => {
            let kind = retrieval_failure_kind(&e);
            fail!("text_retrieval", kind, e)
        }
    };
    artifacts.seeds = text_stage.seeds.clone();
    artifacts.text_guided = Some(text_stage.subgraph.to_graph());

    // stage 2 step A: query-guided scene pruning
    let pruned = clock.run("scene_pruning", || match config.toggles.pruning {
        PruningMode::Off => Ok(crate::retrieval::PruneOutcome {
            scene: scene.clone(),
            unknown_keeps: 0,
            fallback_no_prune: false,
        }),
        PruningMode::Graph => prune_scene_graph(&scene, &text_stage.subgraph, gateway),
        PruningMode::Query => prune_scene_graph_with_context(&scene, question, gateway),
    });
    let pruned = match pruned {
        Ok(outcome) => {
            warnings.prune_unknown_keeps += outcome.unknown_keeps as u32;
            warnings.prune_fallback += u32::from(outcome.fallback_no_prune);
            outcome.scene
        }
        Err(e) => {
            let kind = retrieval_failure_kind(&e);
            fail!("scene_pruning", kind, e)
        }
    };
    artifacts.pruned_scene = Some(pruned.clone());

    // stage 2 step B: vision retrieval; an empty pruned scene retrieves
    // nothing and needs no index
    let vision_index = if pruned.entities.is_empty() {
        None
    } else {
        match config.retrieval.vision_mode {
            VisionMode::V2v => match &indexes.image {
                Some(index) => Some(index),
                None => fail!(
                    "vision_retrieval",
                    FailureKind::Data,
                    "v2v retrieval requires an image index"
                ),
            },
            VisionMode::V2t => Some(&indexes.text),
        }
    };
    let image_embedder = Embedder::new(
        gateway,
        Modality::Image,
        vision_index.map(VectorIndex::dim),
    );
    let vision_stage = clock.run("vision_retrieval", || match vision_index {
        None => Ok(crate::retrieval::VisionStage {
            subgraph: SubgraphRef::empty(commonsense, Provenance::VisionGuided),
            scores: Default::default(),
            skipped_crops: 0,
        }),
        Some(index) => vision_retrieve(
            &pruned,
            commonsense,
            index,
            config.retrieval.vision_keep,
            config.retrieval.vision_mode,
            &image_embedder,
            resolver,
        ),
    });
    let vision_stage = match vision_stage {
        Ok(stage) => {
            warnings.skipped_crops += stage.skipped_crops as u32;
            stage
        }
        Err(e) => {
            let kind = retrieval_failure_kind(&e);
            fail!("vision_retrieval", kind, e)
        }
    };
    artifacts.vision_guided = Some(vision_stage.subgraph.to_graph());

    // union of the two commonsense subgraphs
    let unified_commonsense = clock.run("unify", || {
        unify_commonsense(&text_stage.subgraph, &vision_stage.subgraph)
    });
    let unified_commonsense = match unified_commonsense {
        Ok(subgraph) => subgraph,
        Err(e) => {
            let kind = retrieval_failure_kind(&e);
            fail!("unify", kind, e)
        }
    };
    let unified_graph = unified_commonsense.to_graph();
    artifacts.unified_commonsense = Some(unified_graph.clone());

    // fusion (or isolated subgraphs when off)
    let fused = if config.toggles.fusion {
        let fusion_context = FusionContext::new(
            &image_embedder,
            &indexes.text,
            indexes.image.as_ref(),
            resolver,
        );
        let fused = clock.run("fusion", || {
            let matches = match_entities(
                &pruned,
                &unified_commonsense,
                config.alpha,
                config.tau,
                &fusion_context,
            )?;
            let mut graph = fuse(&pruned, &unified_commonsense, &matches)?;
            graph.query = Some(question.to_string());
            Ok::<UnifiedGraph, FusionError>(graph)
        });
        match fused {
            Ok(graph) => Some(graph),
            Err(e) => {
                let kind = fusion_failure_kind(&e);
                fail!("fusion", kind, e)
            }
        }
    } else {
        None
    };
    artifacts.fused = fused.clone();

    // refinement only applies to a fused graph
    let final_fused = match fused {
        Some(graph) if config.toggles.refinement && config.refine_steps > 0 => {
            let outcome = clock.run("refinement", || {
                refine(
                    graph,
                    question,
                    image_ref,
                    commonsense,
                    gateway,
                    config.refine_steps,
                )
            });
            warnings.refinement_warnings += outcome.trace.warnings;
            record.trace = outcome.trace;
            artifacts.fused = Some(outcome.graph.clone());
            Some(outcome.graph)
        }
        other => other,
    };

    // answer generation
    let answer = clock.run("generation", || -> Result<String, GatewayError> {
        let source = match &final_fused {
            Some(graph) => ContextSource::Fused(graph),
            None => ContextSource::Isolated {
                scene: &pruned,
                commonsense: &unified_graph,
            },
        };
        let context = serialize_context(&source);
        artifacts.context = Some(context.clone());
        let media = [MediaPart::uri(image_ref)];
        let (template_id, prompt) = if context_is_empty(&source) {
            (
                templates::ANSWER_ZERO_SHOT,
                gateway.render(templates::ANSWER_ZERO_SHOT, &[("question", question)])?,
            )
        } else {
            (
                templates::ANSWER_GENERATION,
                gateway.render(
                    templates::ANSWER_GENERATION,
                    &[("context", context.as_str()), ("question", question)],
                )?,
            )
        };
        artifacts.answer_prompt = Some(prompt.clone());
        let mut request = gateway.request(EndpointRole::VisionChat, prompt);
        request.template_id = Some(template_id.to_string());
        request.media = media.to_vec();
        let body = gateway.call(&request)?;
        Ok(body.trim().to_string())
    });
    match answer {
        // a record carries a non-empty answer or an explicit failure
        Ok(answer) if answer.is_empty() => {
            fail!("generation", FailureKind::Gateway, "model returned an empty answer")
        }
        Ok(answer) => record.answer = answer,
        Err(e) => fail!("generation", FailureKind::Gateway, e),
    }

    record.timings = clock.timings;
    record.total_millis = total_start.elapsed().as_secs_f64() * 1000.0;
    record.warnings = warnings;
    (record, artifacts)
}
