//! Bounded agent loop refining the unified graph.
//!
//! Each step renders the refinement prompt with the query, image, counts,
//! and serialized graph, then applies the returned action: Expand pulls the
//! named nodes' 1-hop neighbors out of the commonsense graph, Prune removes
//! named nodes with their incident edges, Terminate ends the loop. At most
//! `t` steps run; unparseable output counts as Terminate with a warning, and
//! a gateway error aborts the loop returning the last valid graph with an
//! error flag.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::fusion::{
    commonsense_node_id, sort_edges, EdgeOrigin, NodeOrigin, UnifiedEdge, UnifiedGraph,
    UnifiedNode,
};
use crate::gateway::{
    templates, EndpointRole, GatewayError, MediaPart, ModelGateway, ParsedValue, SchemaId,
};
use crate::mmkg::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recommendation {
    Expand,
    Prune,
    Terminate,
}

/// One parsed refinement decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementAction {
    pub recommendation: Recommendation,
    pub nodes_to_expand: Vec<String>,
    pub nodes_to_prune: Vec<String>,
    pub analysis: String,
    pub reason: String,
    pub confidence: f64,
}

impl RefinementAction {
    pub fn terminate(analysis: impl Into<String>) -> Self {
        RefinementAction {
            recommendation: Recommendation::Terminate,
            nodes_to_expand: Vec::new(),
            nodes_to_prune: Vec::new(),
            analysis: analysis.into(),
            reason: String::new(),
            confidence: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: RefinementAction,
    pub nodes_added: Vec<String>,
    pub nodes_removed: Vec<String>,
    pub nodes_after: usize,
    pub edges_after: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub steps: Vec<TraceStep>,
    pub warnings: u32,
    /// Set when a gateway error ended the loop early.
    pub aborted_by_error: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub graph: UnifiedGraph,
    pub trace: RefinementTrace,
}

/// Adds the 1-hop commonsense neighborhood of each named node. Names that do
/// not resolve to a commonsense-backed node are ignored with a warning.
/// Returns the new graph, the added unified node ids, and the warning count.
pub fn apply_expand(
    graph: &UnifiedGraph,
    node_ids: &[String],
    commonsense: &Graph,
) -> (UnifiedGraph, Vec<String>, u32) {
    let mut next = graph.clone();
    let mut added = Vec::new();
    let mut warnings = 0;
    let adjacency = commonsense.undirected_adjacency();

    for name in node_ids {
        let resolved = next.resolve(name).and_then(|node| {
            node.commonsense_id
                .clone()
                .map(|commonsense_id| (node.id.clone(), commonsense_id))
        });
        let Some((anchor_unified_id, anchor_id)) = resolved else {
            warnings += 1;
            continue;
        };
        if !commonsense.contains(&anchor_id) {
            warnings += 1;
            continue;
        }
        let neighbors: BTreeSet<String> = adjacency
            .get(anchor_id.as_str())
            .map(|set| set.iter().map(|s| s.to_string()).collect())
            .unwrap_or_default();

        let present_commonsense: BTreeSet<String> = next
            .nodes
            .values()
            .filter_map(|node| node.commonsense_id.clone())
            .collect();

        for neighbor in &neighbors {
            if present_commonsense.contains(neighbor) {
                continue;
            }
            let entity = &commonsense.entities[neighbor];
            let id = commonsense_node_id(neighbor);
            next.nodes.insert(
                id.clone(),
                UnifiedNode {
                    id: id.clone(),
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
                    commonsense_id: Some(neighbor.clone()),
                    alignment: None,
                },
            );
            added.push(id);
        }

        // connecting edges between the anchor and its neighborhood
        let unified_id_of = |commonsense_id: &str| -> Option<String> {
            if commonsense_id == anchor_id {
                return Some(anchor_unified_id.clone());
            }
            next.nodes
                .values()
                .find(|node| node.commonsense_id.as_deref() == Some(commonsense_id))
                .map(|node| node.id.clone())
        };
        for relation in &commonsense.relations {
            let touches_anchor = relation.source == anchor_id || relation.target == anchor_id;
            if !touches_anchor {
                continue;
            }
            let other = if relation.source == anchor_id {
                &relation.target
            } else {
                &relation.source
            };
            if !neighbors.contains(other) {
                continue;
            }
            let (Some(source), Some(target)) =
                (unified_id_of(&relation.source), unified_id_of(&relation.target))
            else {
                continue;
            };
            let exists = next.edges.iter().any(|e| {
                e.source == source && e.predicate == relation.predicate && e.target == target
            });
            if !exists {
                next.edges.push(UnifiedEdge {
                    source,
                    target,
                    predicate: relation.predicate.clone(),
                    confidence: relation.confidence,
                    origin: EdgeOrigin::Commonsense,
                    evidence: relation.evidence.clone(),
                });
            }
        }
    }
    sort_edges(&mut next.edges);
    (next, added, warnings)
}

/// Removes the named nodes and their incident edges; unknown names are
/// ignored with a warning.
pub fn apply_prune(graph: &UnifiedGraph, node_ids: &[String]) -> (UnifiedGraph, Vec<String>, u32) {
    let mut next = graph.clone();
    let mut removed = Vec::new();
    let mut warnings = 0;
    for name in node_ids {
        let Some(id) = next.resolve(name).map(|node| node.id.clone()) else {
            warnings += 1;
            continue;
        };
        next.nodes.remove(&id);
        next.edges.retain(|e| e.source != id && e.target != id);
        removed.push(id);
    }
    (next, removed, warnings)
}

/// Runs the bounded refinement loop: at most `t` steps, hence at most `t`
/// gateway calls' worth of logical operations.
pub fn refine(
    graph: UnifiedGraph,
    query: &str,
    image_ref: &str,
    commonsense: &Graph,
    gateway: &ModelGateway,
    t: usize,
) -> RefineOutcome {
    let mut current = graph;
    let mut trace = RefinementTrace::default();

    for step in 0..t {
        let node_count = current.node_count().to_string();
        let edge_count = current.edge_count().to_string();
        let serialized = crate::fusion::serialize_unified(&current);
        let media = [MediaPart::uri(image_ref)];
        let result = gateway.call_structured(
            EndpointRole::VisionChat,
            templates::GRAPH_REFINEMENT,
            &[
                ("query", query),
                ("query_image", image_ref),
                ("node_count", node_count.as_str()),
                ("edge_count", edge_count.as_str()),
                ("graph", serialized.as_str()),
            ],
            &media,
            SchemaId::RefinementAction,
        );

        let action = match result {
            Ok(ParsedValue::RefinementAction(action)) => action,
            Ok(_) => unreachable!("schema id fixes the variant"),
            Err(GatewayError::UnparseableOutput { .. }) => {
                trace.warnings += 1;
                trace.steps.push(TraceStep {
                    step,
                    action: RefinementAction::terminate("unparseable refinement output"),
                    nodes_added: Vec::new(),
                    nodes_removed: Vec::new(),
                    nodes_after: current.node_count(),
                    edges_after: current.edge_count(),
                });
                break;
            }
            Err(error) => {
                trace.aborted_by_error = true;
                trace.error = Some(error.to_string());
                break;
            }
        };

        if action.recommendation == Recommendation::Terminate {
            trace.steps.push(TraceStep {
                step,
                action,
                nodes_added: Vec::new(),
                nodes_removed: Vec::new(),
                nodes_after: current.node_count(),
                edges_after: current.edge_count(),
            });
            break;
        }

        // a step may carry both lists; expand first, then prune
        let (expanded, added, expand_warnings) =
            apply_expand(&current, &action.nodes_to_expand, commonsense);
        let (pruned, removed, prune_warnings) = apply_prune(&expanded, &action.nodes_to_prune);
        current = pruned;
        trace.warnings += expand_warnings + prune_warnings;
        trace.steps.push(TraceStep {
            step,
            action,
            nodes_added: added,
            nodes_removed: removed,
            nodes_after: current.node_count(),
            edges_after: current.edge_count(),
        });
    }

    debug_assert!(trace.steps.len() <= t);
    RefineOutcome {
        graph: current,
        trace,
    }
}
