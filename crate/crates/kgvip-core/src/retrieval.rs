//! Two-stage retrieval over the commonsense graph.
//!
//! Stage 1 (text): query entity mentions link to graph seeds by embedding
//! similarity, a k-hop neighborhood is cut, personalized PageRank ranks it,
//! and the top-n nodes (seeds always kept) become the text-guided subgraph.
//!
//! Stage 2 (vision): the scene graph is pruned against the text-guided
//! subgraph, then each surviving crop retrieves the top-m visually closest
//! commonsense entities — either against entity images (v2v) or entity text
//! (v2t). The union of the two subgraphs is the retrieval result.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbedPayload, Embedder, IndexError, VectorIndex};
use crate::gateway::{
    templates, EndpointRole, GatewayError, KeepLists, ModelGateway, ParsedValue, SchemaId,
};
use crate::mmkg::{
    induced_subgraph, k_hop_subgraph, Graph, GraphError, Provenance, SubgraphRef,
};
use crate::scene::{crop_name, crop_region, MediaResolver, SceneError, SceneGraph};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("seed set is empty")]
    EmptySeeds,
    #[error("seed {id:?} is not in the subgraph")]
    SeedOutsideSubgraph { id: String },
    #[error("restart probability {value} outside (0,1]")]
    BadRestart { value: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// A question/image pair plus the entity mentions extracted from the question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryContext {
    pub query: String,
    pub image_ref: String,
    #[serde(default)]
    pub mentions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprParams {
    pub restart: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PprParams {
    fn default() -> Self {
        PprParams {
            restart: 0.15,
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

/// Scores from a personalized PageRank run; nonnegative, summing to 1 over
/// the ranked subgraph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedScores {
    pub scores: BTreeMap<String, f64>,
    pub params: PprParams,
    pub iterations: usize,
    pub converged: bool,
}

impl RankedScores {
    /// Node ids by descending score, ties by ascending id.
    pub fn ranking(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.scores.keys().map(String::as_str).collect();
        ids.sort_by(|a, b| {
            let sa = self.scores[*a];
            let sb = self.scores[*b];
            sb.partial_cmp(&sa).expect("finite scores").then_with(|| a.cmp(b))
        });
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisionMode {
    /// Scene crops match commonsense entity images directly.
    V2v,
    /// Scene crops match commonsense entity text descriptions.
    V2t,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Hop radius k of the seed neighborhood.
    pub hop_radius: usize,
    /// Top-n keep count of the text stage.
    pub text_keep: usize,
    /// Top-m keep count of the vision stage.
    pub vision_keep: usize,
    /// Minimum cosine for linking a mention to a seed entity.
    pub seed_link_threshold: f64,
    pub vision_mode: VisionMode,
    pub ppr: PprParams,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            hop_radius: 2,
            text_keep: 15,
            vision_keep: 10,
            seed_link_threshold: 0.35,
            vision_mode: VisionMode::V2v,
            ppr: PprParams::default(),
        }
    }
}

/// Personalized PageRank by power iteration on the undirected,
/// degree-normalized walk with uniform restart over the seeds. Nodes without
/// neighbors restart to the seeds. `restart = 1` is exactly the seed-uniform
/// distribution.
pub fn ppr_rank(
    graph: &Graph,
    seeds: &BTreeSet<String>,
    params: PprParams,
) -> Result<RankedScores, RetrievalError> {
    if seeds.is_empty() {
        return Err(RetrievalError::EmptySeeds);
    }
    if !(params.restart > 0.0 && params.restart <= 1.0) {
        return Err(RetrievalError::BadRestart {
            value: params.restart,
        });
    }
    for seed in seeds {
        if !graph.contains(seed) {
            return Err(RetrievalError::SeedOutsideSubgraph { id: seed.clone() });
        }
    }

    let ids: Vec<&String> = graph.entities.keys().collect();
    let index_of: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let adjacency_map = graph.undirected_adjacency();
    let adjacency: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| {
            adjacency_map[id.as_str()]
                .iter()
                .map(|n| index_of[n])
                .collect()
        })
        .collect();

    let n = ids.len();
    let mut restart_vec = vec![0.0; n];
    for seed in seeds {
        restart_vec[index_of[seed.as_str()]] = 1.0 / seeds.len() as f64;
    }

    let c = params.restart;
    let mut scores = restart_vec.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iterations {
        iterations += 1;
        let mut next = vec![0.0; n];
        let mut dangling_mass = 0.0;
        for u in 0..n {
            let degree = adjacency[u].len();
            if degree == 0 {
                dangling_mass += scores[u];
                continue;
            }
            let share = (1.0 - c) * scores[u] / degree as f64;
            for &v in &adjacency[u] {
                next[v] += share;
            }
        }
        let teleport = c + (1.0 - c) * dangling_mass;
        for (value, restart) in next.iter_mut().zip(restart_vec.iter()) {
            *value += teleport * restart;
        }
        let delta: f64 = scores
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        scores = next;
        if delta < params.tolerance {
            converged = true;
            break;
        }
    }

    Ok(RankedScores {
        scores: ids
            .iter()
            .zip(scores)
            .map(|(id, score)| ((*id).clone(), score))
            .collect(),
        params,
        iterations,
        converged,
    })
}

/// Extracts entity mentions from the query via the chat model, deduplicated
/// in first-occurrence order. An empty list is a valid outcome.
pub fn extract_query_entities(
    query: &str,
    gateway: &ModelGateway,
) -> Result<Vec<String>, RetrievalError> {
    let parsed = gateway.call_structured(
        EndpointRole::Chat,
        templates::ENTITY_EXTRACTION,
        &[("query", query)],
        &[],
        SchemaId::EntityList,
    )?;
    let ParsedValue::EntityList(raw) = parsed else {
        unreachable!("schema id fixes the variant");
    };
    let mut seen = BTreeSet::new();
    Ok(raw
        .into_iter()
        .filter(|m| !m.trim().is_empty() && seen.insert(m.clone()))
        .collect())
}

/// Links each mention to its top-1 entity when the similarity reaches the
/// threshold; unlinked mentions drop out silently.
pub fn link_entities(
    mentions: &[String],
    embedder: &Embedder<'_>,
    text_index: &VectorIndex,
    threshold: f64,
) -> Result<BTreeSet<String>, RetrievalError> {
    let mut seeds = BTreeSet::new();
    for mention in mentions {
        let vector = embedder.embed(&EmbedPayload::Text(mention.clone()))?;
        let hits = crate::embedding::top_k(text_index, &vector, 1)?;
        if let Some((key, score)) = hits.into_iter().next() {
            if score >= threshold {
                seeds.insert(key);
            }
        }
    }
    Ok(seeds)
}

/// Output of the text stage.
#[derive(Debug)]
pub struct TextStage<'g> {
    pub mentions: Vec<String>,
    pub seeds: BTreeSet<String>,
    pub subgraph: SubgraphRef<'g>,
    pub ranked: Option<RankedScores>,
}

/// Stage 1: mentions → seeds → k-hop → PPR → top-n (seeds exempt from the
/// cut) → induced subgraph, provenance text-guided. An empty seed set yields
/// an empty subgraph and the pipeline proceeds on the vision stage alone.
pub fn text_guided_subgraph<'g>(
    commonsense: &'g Graph,
    query: &str,
    config: &RetrievalConfig,
    text_index: &VectorIndex,
    embedder: &Embedder<'_>,
    gateway: &ModelGateway,
) -> Result<TextStage<'g>, RetrievalError> {
    let mentions = extract_query_entities(query, gateway)?;
    let seeds = link_entities(&mentions, embedder, text_index, config.seed_link_threshold)?;
    text_stage_from_seeds(commonsense, mentions, seeds, config)
}

/// The deterministic tail of stage 1, separated so tests can drive it with
/// known seeds.
pub fn text_stage_from_seeds<'g>(
    commonsense: &'g Graph,
    mentions: Vec<String>,
    seeds: BTreeSet<String>,
    config: &RetrievalConfig,
) -> Result<TextStage<'g>, RetrievalError> {
    if seeds.is_empty() {
        return Ok(TextStage {
            mentions,
            seeds,
            subgraph: SubgraphRef::empty(commonsense, Provenance::TextGuided),
            ranked: None,
        });
    }
    let neighborhood = k_hop_subgraph(commonsense, &seeds, config.hop_radius)?;
    let ranked = ppr_rank(&neighborhood.to_graph(), &seeds, config.ppr)?;
    let mut keep: BTreeSet<String> = ranked
        .ranking()
        .into_iter()
        .take(config.text_keep)
        .map(str::to_string)
        .collect();
    keep.extend(seeds.iter().cloned());
    let subgraph = induced_subgraph(commonsense, &keep)?.with_provenance(Provenance::TextGuided);
    Ok(TextStage {
        mentions,
        seeds,
        subgraph,
        ranked: Some(ranked),
    })
}

/// Entity lines for the pruning prompt: `id: label (type)`.
pub fn entity_lines(graph: &Graph) -> String {
    graph
        .entities
        .values()
        .map(|e| format!("{}: {} ({})", e.id, e.label, e.entity_type))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Relation lines for the pruning prompt: `(source, predicate, target)`.
pub fn relation_lines(graph: &Graph) -> String {
    graph
        .relations
        .iter()
        .map(|r| format!("({}, {}, {})", r.source, r.predicate, r.target))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Serialization of a commonsense subgraph into the pruning prompt.
pub fn serialize_for_prompt(subgraph: &SubgraphRef<'_>) -> String {
    let graph = subgraph.to_graph();
    let entities = entity_lines(&graph);
    let relations = relation_lines(&graph);
    match (entities.is_empty(), relations.is_empty()) {
        (true, true) => String::new(),
        (false, true) => entities,
        (true, false) => relations,
        (false, false) => format!("{entities}\n{relations}"),
    }
}

fn scene_entity_lines(scene: &SceneGraph) -> String {
    scene
        .entities
        .iter()
        .map(|e| format!("{}: {} ({})", e.entity_id, e.name, e.category.as_str()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn scene_relation_lines(scene: &SceneGraph) -> String {
    scene
        .relations
        .iter()
        .map(|r| format!("({}, {}, {})", r.subject_id, r.predicate, r.object_id))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Outcome of query-guided scene pruning.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub scene: SceneGraph,
    /// keep_entities entries that named nothing in the scene graph.
    pub unknown_keeps: usize,
    /// Set when unparseable output degraded the step to "no pruning".
    pub fallback_no_prune: bool,
}

impl PruneOutcome {
    fn unpruned(scene: &SceneGraph, fallback: bool) -> Self {
        PruneOutcome {
            scene: scene.clone(),
            unknown_keeps: 0,
            fallback_no_prune: fallback,
        }
    }
}

/// Step A: prunes the scene graph against the text-guided subgraph. An empty
/// text-guided subgraph means no pruning (and no model call).
pub fn prune_scene_graph(
    scene: &SceneGraph,
    text_guided: &SubgraphRef<'_>,
    gateway: &ModelGateway,
) -> Result<PruneOutcome, RetrievalError> {
    if text_guided.is_empty() {
        return Ok(PruneOutcome::unpruned(scene, false));
    }
    prune_scene_graph_with_context(scene, &serialize_for_prompt(text_guided), gateway)
}

/// Pruning against an arbitrary context string — the query-pruning ablation
/// substitutes the raw query text for the subgraph serialization.
pub fn prune_scene_graph_with_context(
    scene: &SceneGraph,
    context: &str,
    gateway: &ModelGateway,
) -> Result<PruneOutcome, RetrievalError> {
    if scene.entities.is_empty() {
        return Ok(PruneOutcome::unpruned(scene, false));
    }
    let entities = scene_entity_lines(scene);
    let relations = scene_relation_lines(scene);
    let result = gateway.call_structured(
        EndpointRole::VisionChat,
        templates::QUERY_PRUNING,
        &[
            ("commonsense_subgraph", context),
            ("scene_entities", entities.as_str()),
            ("scene_relations", relations.as_str()),
        ],
        &[],
        SchemaId::KeepLists,
    );
    let lists = match result {
        Ok(ParsedValue::KeepLists(lists)) => lists,
        Ok(_) => unreachable!("schema id fixes the variant"),
        // pruning is an optimization: unparseable output degrades to no pruning
        Err(GatewayError::UnparseableOutput { .. }) => {
            return Ok(PruneOutcome::unpruned(scene, true))
        }
        Err(other) => return Err(other.into()),
    };
    Ok(apply_keep_lists(scene, &lists))
}

pub fn apply_keep_lists(scene: &SceneGraph, lists: &KeepLists) -> PruneOutcome {
    let scene_ids = scene.entity_ids();
    let mut kept_ids = BTreeSet::new();
    let mut unknown = 0;
    for name in &lists.keep_entities {
        if scene_ids.contains(name.as_str()) {
            kept_ids.insert(name.as_str());
        } else {
            unknown += 1;
        }
    }
    let entities = scene
        .entities
        .iter()
        .filter(|e| kept_ids.contains(e.entity_id.as_str()))
        .cloned()
        .collect();
    let requested: BTreeSet<(&str, &str, &str)> = lists
        .keep_relations
        .iter()
        .map(|r| (r.s.as_str(), r.p.as_str(), r.o.as_str()))
        .collect();
    let relations = scene
        .relations
        .iter()
        .filter(|r| {
            kept_ids.contains(r.subject_id.as_str())
                && kept_ids.contains(r.object_id.as_str())
                && requested.contains(&(
                    r.subject_id.as_str(),
                    r.predicate.as_str(),
                    r.object_id.as_str(),
                ))
        })
        .cloned()
        .collect();
    PruneOutcome {
        scene: SceneGraph {
            image_ref: scene.image_ref.clone(),
            width: scene.width,
            height: scene.height,
            entities,
            relations,
        },
        unknown_keeps: unknown,
        fallback_no_prune: false,
    }
}

/// Output of the vision stage.
#[derive(Debug)]
pub struct VisionStage<'g> {
    pub subgraph: SubgraphRef<'g>,
    /// Best score per retrieved commonsense entity.
    pub scores: BTreeMap<String, f64>,
    /// Scene entities skipped because their crop could not be produced.
    pub skipped_crops: usize,
}

/// Splits a `{entity_id}#{i}` image-index key back into its entity id.
pub fn image_key_entity(key: &str) -> &str {
    key.rsplit_once('#').map(|(id, _)| id).unwrap_or(key)
}

/// Image-index key for the i-th image of an entity.
pub fn image_key(entity_id: &str, i: usize) -> String {
    format!("{entity_id}#{i}")
}

/// Step B: embeds each surviving scene crop and retrieves the top-m
/// commonsense entities. In v2v mode an entity scores the max cosine over its
/// image vectors; in v2t mode its text vector stands in. Scores aggregate by
/// max over scene crops. Scene entities whose crop cannot be produced are
/// skipped; gateway and embedding errors propagate.
pub fn vision_retrieve<'g>(
    pruned_scene: &SceneGraph,
    commonsense: &'g Graph,
    index: &VectorIndex,
    keep: usize,
    mode: VisionMode,
    image_embedder: &Embedder<'_>,
    resolver: &MediaResolver,
) -> Result<VisionStage<'g>, RetrievalError> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    let mut skipped = 0;

    for entity in &pruned_scene.entities {
        let crop = match crop_region(resolver, &pruned_scene.image_ref, entity.bbox_px) {
            Ok(bytes) => bytes,
            Err(SceneError::MediaUnavailable { .. }) | Err(SceneError::UnreadableImage { .. }) => {
                skipped += 1;
                continue;
            }
            Err(other) => return Err(other.into()),
        };
        let crop_vector = image_embedder.embed(&EmbedPayload::Media {
            name: crop_name(&pruned_scene.image_ref, entity.bbox_px),
            bytes: crop,
        })?;

        for (key, vector) in index.iter() {
            let candidate = match mode {
                VisionMode::V2v => image_key_entity(key),
                VisionMode::V2t => key.as_str(),
            };
            if !commonsense.contains(candidate) {
                continue;
            }
            let score = cosine(&crop_vector, vector)?;
            let slot = best.entry(candidate.to_string()).or_insert(f64::NEG_INFINITY);
            if score > *slot {
                *slot = score;
            }
        }
    }

    let mut ranked: Vec<(&String, &f64)> = best.iter().collect();
    ranked.sort_by(|(ka, sa), (kb, sb)| {
        sb.partial_cmp(sa).expect("finite scores").then_with(|| ka.cmp(kb))
    });
    let keep_ids: BTreeSet<String> = ranked
        .into_iter()
        .take(keep)
        .map(|(k, _)| k.clone())
        .collect();
    let subgraph =
        induced_subgraph(commonsense, &keep_ids)?.with_provenance(Provenance::VisionGuided);
    Ok(VisionStage {
        subgraph,
        scores: best,
        skipped_crops: skipped,
    })
}

/// The union of the text-guided and vision-guided subgraphs.
pub fn unify_commonsense<'g>(
    text_guided: &SubgraphRef<'g>,
    vision_guided: &SubgraphRef<'g>,
) -> Result<SubgraphRef<'g>, RetrievalError> {
    Ok(crate::mmkg::subgraph_union(text_guided, vision_guided)?)
}
