//! Cross-modal entity alignment and graph fusion.
//!
//! Each (scene entity, commonsense entity) pair is scored
//! `S = α·⟨crop, text⟩ + (1−α)·⟨crop, image⟩`, where the visual term is the
//! max cosine over the commonsense entity's image vectors. A commonsense
//! entity with no image vectors scores on the cross-modal term alone
//! (effective α = 1) and the pair is flagged text-only. Matching is greedy
//! one-to-one over the pairs sorted by descending score.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbedPayload, Embedder, EmbeddingVector, IndexError, VectorIndex};
use crate::mmkg::SubgraphRef;
use crate::scene::{
    crop_name, crop_region, MediaResolver, SceneCategory, SceneEntity, SceneError, SceneGraph,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("commonsense entity {id:?} has no text vector")]
    MissingTextVector { id: String },
    #[error("alpha {value} outside [0,1]")]
    BadAlpha { value: f64 },
    #[error("match references unknown id {id:?}")]
    UnknownMatchId { id: String },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// A scored scene/commonsense pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub scene_id: String,
    pub commonsense_id: String,
    pub score: f64,
    pub cross_modal: f64,
    pub visual: Option<f64>,
    pub text_only: bool,
}

/// `α·cross + (1−α)·visual`; a missing visual term collapses to the
/// cross-modal term alone.
pub fn combine_scores(cross_modal: f64, visual: Option<f64>, alpha: f64) -> (f64, bool) {
    match visual {
        Some(v) => (alpha * cross_modal + (1.0 - alpha) * v, false),
        None => (cross_modal, true),
    }
}

/// Embedding sources for alignment scoring. The crop embedder shares its
/// content-hash cache with retrieval, and crops themselves are cached per
/// scene entity so pairwise scoring never redoes image work.
pub struct FusionContext<'a> {
    pub image_embedder: &'a Embedder<'a>,
    pub text_index: &'a VectorIndex,
    pub image_index: Option<&'a VectorIndex>,
    pub resolver: &'a MediaResolver,
    crop_cache: std::sync::Mutex<BTreeMap<String, Option<EmbeddingVector>>>,
}

impl<'a> FusionContext<'a> {
    pub fn new(
        image_embedder: &'a Embedder<'a>,
        text_index: &'a VectorIndex,
        image_index: Option<&'a VectorIndex>,
        resolver: &'a MediaResolver,
    ) -> Self {
        FusionContext {
            image_embedder,
            text_index,
            image_index,
            resolver,
            crop_cache: std::sync::Mutex::new(BTreeMap::new()),
        }
    }

    fn crop_vector(
        &self,
        scene: &SceneGraph,
        entity: &SceneEntity,
    ) -> Result<Option<EmbeddingVector>, FusionError> {
        let key = crop_name(&scene.image_ref, entity.bbox_px);
        if let Some(hit) = self.crop_cache.lock().expect("crop cache").get(&key) {
            return Ok(hit.clone());
        }
        let vector = match crop_region(self.resolver, &scene.image_ref, entity.bbox_px) {
            Ok(bytes) => Some(self.image_embedder.embed(&EmbedPayload::Media {
                name: key.clone(),
                bytes,
            })?),
            Err(SceneError::MediaUnavailable { .. }) | Err(SceneError::UnreadableImage { .. }) => {
                None
            }
            Err(other) => return Err(other.into()),
        };
        self.crop_cache
            .lock()
            .expect("crop cache")
            .insert(key, vector.clone());
        Ok(vector)
    }

    fn visual_term(&self, commonsense_id: &str, crop: &EmbeddingVector) -> Result<Option<f64>, FusionError> {
        let Some(index) = self.image_index else {
            return Ok(None);
        };
        let mut best: Option<f64> = None;
        for (key, vector) in index.iter() {
            if crate::retrieval::image_key_entity(key) != commonsense_id {
                continue;
            }
            let score = cosine(crop, vector)?;
            best = Some(best.map_or(score, |b: f64| b.max(score)));
        }
        Ok(best)
    }
}

/// Scores one pair. Errors when the commonsense entity lacks a text vector.
pub fn alignment_score(
    scene: &SceneGraph,
    scene_entity: &SceneEntity,
    commonsense_id: &str,
    alpha: f64,
    context: &FusionContext<'_>,
) -> Result<Option<AlignmentPair>, FusionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FusionError::BadAlpha { value: alpha });
    }
    let Some(crop) = context.crop_vector(scene, scene_entity)? else {
        return Ok(None);
    };
    let text_vector = context
        .text_index
        .get(commonsense_id)
        .ok_or_else(|| FusionError::MissingTextVector {
            id: commonsense_id.to_string(),
        })?;
    let cross_modal = cosine(&crop, text_vector)?;
    let visual = context.visual_term(commonsense_id, &crop)?;
    let (score, text_only) = combine_scores(cross_modal, visual, alpha);
    Ok(Some(AlignmentPair {
        scene_id: scene_entity.entity_id.clone(),
        commonsense_id: commonsense_id.to_string(),
        score,
        cross_modal,
        visual,
        text_only,
    }))
}

/// Greedy one-to-one matching over pairs sorted by descending score, ties by
/// ascending scene id then commonsense id; only pairs scoring ≥ τ survive.
pub fn greedy_match(pairs: &[AlignmentPair], tau: f64) -> Vec<AlignmentPair> {
    let mut sorted: Vec<&AlignmentPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.scene_id.cmp(&b.scene_id))
            .then_with(|| a.commonsense_id.cmp(&b.commonsense_id))
    });
    let mut used_scene = BTreeSet::new();
    let mut used_commonsense = BTreeSet::new();
    let mut matches = Vec::new();
    for pair in sorted {
        if pair.score < tau
            || used_scene.contains(&pair.scene_id)
            || used_commonsense.contains(&pair.commonsense_id)
        {
            continue;
        }
        used_scene.insert(pair.scene_id.clone());
        used_commonsense.insert(pair.commonsense_id.clone());
        matches.push(pair.clone());
    }
    matches
}

/// Scores every pair of the two graphs and matches greedily. Scene entities
/// whose crop cannot be produced are skipped.
pub fn match_entities(
    scene: &SceneGraph,
    commonsense: &SubgraphRef<'_>,
    alpha: f64,
    tau: f64,
    context: &FusionContext<'_>,
) -> Result<Vec<AlignmentPair>, FusionError> {
    let mut pairs = Vec::new();
    for scene_entity in &scene.entities {
        for commonsense_id in commonsense.nodes() {
            if let Some(pair) =
                alignment_score(scene, scene_entity, commonsense_id, alpha, context)?
            {
                pairs.push(pair);
            }
        }
    }
    Ok(greedy_match(&pairs, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrigin {
    SceneOnly,
    CommonsenseOnly,
    Fused,
}

/// A node of the unified graph. Fused nodes take bbox/category/confidence
/// from the scene side and label/description/media from the commonsense side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedNode {
    pub id: String,
    pub origin: NodeOrigin,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<SceneCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_px: Option<[u32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commonsense_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeOrigin {
    Scene,
    Commonsense,
}

impl EdgeOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeOrigin::Scene => "scene",
            EdgeOrigin::Commonsense => "commonsense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedEdge {
    pub source: String,
    pub target: String,
    pub predicate: String,
    pub confidence: f64,
    pub origin: EdgeOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

/// The fused scene + commonsense graph handed to generation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnifiedGraph {
    pub nodes: BTreeMap<String, UnifiedNode>,
    pub edges: Vec<UnifiedEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

pub fn scene_node_id(scene_id: &str) -> String {
    format!("s:{scene_id}")
}

pub fn commonsense_node_id(commonsense_id: &str) -> String {
    format!("c:{commonsense_id}")
}

impl UnifiedGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Looks a model-named node up by unified id, commonsense id, scene id,
    /// or display label, in that order; label ties resolve to the smallest
    /// unified id.
    pub fn resolve(&self, name: &str) -> Option<&UnifiedNode> {
        if let Some(node) = self.nodes.get(name) {
            return Some(node);
        }
        for node in self.nodes.values() {
            if node.commonsense_id.as_deref() == Some(name) {
                return Some(node);
            }
        }
        for node in self.nodes.values() {
            if node.scene_id.as_deref() == Some(name) {
                return Some(node);
            }
        }
        self.nodes.values().find(|node| node.label == name)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let mut scene_ids = BTreeSet::new();
        let mut commonsense_ids = BTreeSet::new();
        for node in self.nodes.values() {
            if let Some(scene_id) = &node.scene_id {
                if !scene_ids.insert(scene_id.clone()) {
                    return Err(FusionError::UnknownMatchId {
                        id: format!("scene id {scene_id} appears twice"),
                    });
                }
            }
            if let Some(commonsense_id) = &node.commonsense_id {
                if !commonsense_ids.insert(commonsense_id.clone()) {
                    return Err(FusionError::UnknownMatchId {
                        id: format!("commonsense id {commonsense_id} appears twice"),
                    });
                }
            }
        }
        for edge in &self.edges {
            for endpoint in [&edge.source, &edge.target] {
                if !self.nodes.contains_key(endpoint) {
                    return Err(FusionError::UnknownMatchId {
                        id: endpoint.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Appends an edge, deduplicating by `(source, predicate, target)` and
/// keeping the max-confidence record (first seen wins ties).
fn push_edge(edges: &mut Vec<UnifiedEdge>, edge: UnifiedEdge) {
    if let Some(existing) = edges.iter_mut().find(|e| {
        e.source == edge.source && e.predicate == edge.predicate && e.target == edge.target
    }) {
        if edge.confidence > existing.confidence {
            *existing = edge;
        }
        return;
    }
    edges.push(edge);
}

pub(crate) fn sort_edges(edges: &mut [UnifiedEdge]) {
    edges.sort_by(|a, b| {
        (&a.source, &a.predicate, &a.target).cmp(&(&b.source, &b.predicate, &b.target))
    });
}

/// Builds the unified graph from the pruned scene graph, the retrieved
/// commonsense subgraph, and the accepted matches. Unmatched nodes carry
/// over with their origin tag; edges from both sides re-point onto the
/// fused nodes; no edge is invented and duplicates keep max confidence.
pub fn fuse(
    scene: &SceneGraph,
    commonsense: &SubgraphRef<'_>,
    matches: &[AlignmentPair],
) -> Result<UnifiedGraph, FusionError> {
    let commonsense_graph = commonsense.to_graph();
    for pair in matches {
        if scene.entity(&pair.scene_id).is_none() {
            return Err(FusionError::UnknownMatchId {
                id: pair.scene_id.clone(),
            });
        }
        if !commonsense_graph.contains(&pair.commonsense_id) {
            return Err(FusionError::UnknownMatchId {
                id: pair.commonsense_id.clone(),
            });
        }
    }

    let matched_scene: BTreeMap<&str, &AlignmentPair> = matches
        .iter()
        .map(|pair| (pair.scene_id.as_str(), pair))
        .collect();
    let matched_commonsense: BTreeSet<&str> = matches
        .iter()
        .map(|pair| pair.commonsense_id.as_str())
        .collect();

    let mut nodes: BTreeMap<String, UnifiedNode> = BTreeMap::new();

    for entity in &scene.entities {
        match matched_scene.get(entity.entity_id.as_str()) {
            Some(pair) => {
                let source = &commonsense_graph.entities[&pair.commonsense_id];
                let id = commonsense_node_id(&pair.commonsense_id);
                nodes.insert(
                    id.clone(),
                    UnifiedNode {
                        id,
                        origin: NodeOrigin::Fused,
                        label: source.label.clone(),
                        category: Some(entity.category),
                        entity_type: Some(source.entity_type.clone()),
                        bbox_px: Some(entity.bbox_px),
                        scene_confidence: Some(entity.confidence),
                        description: Some(source.description.clone()).filter(|d| !d.is_empty()),
                        image_refs: source.image_refs.clone(),
                        metadata: source.metadata.clone(),
                        scene_id: Some(entity.entity_id.clone()),
                        commonsense_id: Some(pair.commonsense_id.clone()),
                        alignment: Some((*pair).clone()),
                    },
                );
            }
            None => {
                let id = scene_node_id(&entity.entity_id);
                nodes.insert(
                    id.clone(),
                    UnifiedNode {
                        id,
                        origin: NodeOrigin::SceneOnly,
                        label: entity.name.clone(),
                        category: Some(entity.category),
                        entity_type: None,
                        bbox_px: Some(entity.bbox_px),
                        scene_confidence: Some(entity.confidence),
                        description: None,
                        image_refs: Vec::new(),
                        metadata: BTreeMap::new(),
                        scene_id: Some(entity.entity_id.clone()),
                        commonsense_id: None,
                        alignment: None,
                    },
                );
            }
        }
    }

    for entity in commonsense_graph.entities.values() {
        if matched_commonsense.contains(entity.id.as_str()) {
            continue; // already present as a fused node
        }
        let id = commonsense_node_id(&entity.id);
        nodes.insert(
            id.clone(),
            UnifiedNode {
                id,
                origin: NodeOrigin::CommonsenseOnly,
                label: entity.label.clone(),
                category: None,
                entity_type: Some(entity.entity_type.clone()),
                bbox_px: None,
                scene_confidence: None,
                description: Some(entity.description.clone()).filter(|d| !d.is_empty()),
                image_refs: entity.image_refs.clone(),
                metadata: entity.metadata.clone(),
                scene_id: None,
                commonsense_id: Some(entity.id.clone()),
                alignment: None,
            },
        );
    }

    let scene_target = |scene_id: &str| -> String {
        match matched_scene.get(scene_id) {
            Some(pair) => commonsense_node_id(&pair.commonsense_id),
            None => scene_node_id(scene_id),
        }
    };

    let mut edges = Vec::new();
    for relation in &scene.relations {
        push_edge(
            &mut edges,
            UnifiedEdge {
                source: scene_target(&relation.subject_id),
                target: scene_target(&relation.object_id),
                predicate: relation.predicate.clone(),
                confidence: relation.confidence,
                origin: EdgeOrigin::Scene,
                evidence: relation.evidence.clone(),
            },
        );
    }
    for relation in &commonsense_graph.relations {
        push_edge(
            &mut edges,
            UnifiedEdge {
                source: commonsense_node_id(&relation.source),
                target: commonsense_node_id(&relation.target),
                predicate: relation.predicate.clone(),
                confidence: relation.confidence,
                origin: EdgeOrigin::Commonsense,
                evidence: relation.evidence.clone(),
            },
        );
    }
    sort_edges(&mut edges);

    let unified = UnifiedGraph {
        nodes,
        edges,
        query: None,
    };
    unified.validate()?;
    Ok(unified)
}

fn node_rank(origin: NodeOrigin) -> u8 {
    match origin {
        NodeOrigin::Fused => 0,
        NodeOrigin::SceneOnly => 1,
        NodeOrigin::CommonsenseOnly => 2,
    }
}

fn origin_tag(origin: NodeOrigin) -> &'static str {
    match origin {
        NodeOrigin::Fused => "fused",
        NodeOrigin::SceneOnly => "scene",
        NodeOrigin::CommonsenseOnly => "commonsense",
    }
}

fn node_line(node: &UnifiedNode) -> String {
    let kind = node
        .category
        .map(|c| c.as_str().to_string())
        .or_else(|| node.entity_type.clone().filter(|t| !t.is_empty()))
        .unwrap_or_else(|| "unknown".into());
    let mut line = format!("[{}] {} — {}", origin_tag(node.origin), node.label, kind);
    if let Some(bbox) = node.bbox_px {
        line.push_str(&format!(
            "; bbox=[{},{},{},{}]",
            bbox[0], bbox[1], bbox[2], bbox[3]
        ));
    }
    if let Some(description) = &node.description {
        line.push_str(&format!("; desc={description}"));
    }
    line
}

/// Deterministic NODES/EDGES text block for prompts and artifacts.
pub fn serialize_unified(graph: &UnifiedGraph) -> String {
    let mut nodes: Vec<&UnifiedNode> = graph.nodes.values().collect();
    nodes.sort_by(|a, b| {
        node_rank(a.origin)
            .cmp(&node_rank(b.origin))
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut out = String::from("NODES:\n");
    for node in &nodes {
        out.push_str(&node_line(node));
        out.push('\n');
    }
    out.push_str("EDGES:\n");
    for edge in &graph.edges {
        let source = graph.nodes.get(&edge.source).map(|n| n.label.as_str());
        let target = graph.nodes.get(&edge.target).map(|n| n.label.as_str());
        if let (Some(source), Some(target)) = (source, target) {
            out.push_str(&format!(
                "({}, {}, {}) [{}]\n",
                source,
                edge.predicate,
                target,
                edge.origin.as_str()
            ));
        }
    }
    out
}
