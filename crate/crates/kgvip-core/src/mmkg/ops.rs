//! Graph operations: construction-time refinement and subgraph algebra.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, VectorIndex};
use crate::gateway::{templates, GatewayError, ModelGateway, ParsedValue, SchemaId};

use super::{Entity, Graph, GraphError, Provenance, Relation, SubgraphRef};

/// Node/edge/image/component counts of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub image_refs: usize,
    pub components: usize,
}

pub fn graph_stats(graph: &Graph) -> GraphStats {
    GraphStats {
        nodes: graph.node_count(),
        edges: graph.edge_count(),
        image_refs: graph.image_ref_count(),
        components: weak_components(graph).len(),
    }
}

/// Weakly-connected components, each sorted, ordered by smallest member id.
fn weak_components(graph: &Graph) -> Vec<Vec<String>> {
    let adjacency = graph.undirected_adjacency();
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    let mut components = Vec::new();
    for start in graph.entities.keys() {
        if visited.contains(start.as_str()) {
            continue;
        }
        let mut component = Vec::new();
        let mut queue = VecDeque::from([start.as_str()]);
        visited.insert(start);
        while let Some(id) = queue.pop_front() {
            component.push(id.to_string());
            if let Some(neighbors) = adjacency.get(id) {
                for &next in neighbors {
                    if visited.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        component.sort();
        components.push(component);
    }
    components
}

/// Subgraph induced by the largest weakly-connected component; ties broken by
/// smallest lexicographic member id. The empty graph maps to itself.
pub fn giant_component(graph: &Graph) -> Graph {
    let components = weak_components(graph);
    let Some(largest) = components.iter().max_by(|a, b| {
        a.len()
            .cmp(&b.len())
            .then_with(|| b[0].cmp(&a[0])) // smaller first id wins the tie
    }) else {
        return Graph::empty();
    };
    let keep: BTreeSet<String> = largest.iter().cloned().collect();
    let entities = graph
        .entities
        .iter()
        .filter(|(id, _)| keep.contains(*id))
        .map(|(id, e)| (id.clone(), e.clone()))
        .collect();
    let relations = graph
        .relations
        .iter()
        .filter(|r| keep.contains(&r.source) && keep.contains(&r.target))
        .cloned()
        .collect();
    Graph {
        entities,
        relations,
    }
}

/// Drops relations with confidence strictly below the threshold.
pub fn prune_low_confidence(graph: &Graph, threshold: f64) -> Graph {
    Graph {
        entities: graph.entities.clone(),
        relations: graph
            .relations
            .iter()
            .filter(|r| r.confidence >= threshold)
            .cloned()
            .collect(),
    }
}

/// All nodes within undirected distance `k` of any seed, with induced relations.
pub fn k_hop_subgraph<'g>(
    graph: &'g Graph,
    seeds: &BTreeSet<String>,
    k: usize,
) -> Result<SubgraphRef<'g>, GraphError> {
    for seed in seeds {
        if !graph.contains(seed) {
            return Err(GraphError::UnknownNode { id: seed.clone() });
        }
    }
    let adjacency = graph.undirected_adjacency();
    let mut reached: BTreeSet<String> = seeds.clone();
    let mut frontier: BTreeSet<String> = seeds.clone();
    for _ in 0..k {
        let mut next = BTreeSet::new();
        for id in &frontier {
            if let Some(neighbors) = adjacency.get(id.as_str()) {
                for &neighbor in neighbors {
                    if !reached.contains(neighbor) {
                        next.insert(neighbor.to_string());
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        reached.extend(next.iter().cloned());
        frontier = next;
    }
    induced(graph, reached, Provenance::Adhoc)
}

/// Exactly the relations with both endpoints inside `node_set`.
pub fn induced_subgraph<'g>(
    graph: &'g Graph,
    node_set: &BTreeSet<String>,
) -> Result<SubgraphRef<'g>, GraphError> {
    for id in node_set {
        if !graph.contains(id) {
            return Err(GraphError::UnknownNode { id: id.clone() });
        }
    }
    induced(graph, node_set.clone(), Provenance::Adhoc)
}

pub(crate) fn induced(
    graph: &Graph,
    nodes: BTreeSet<String>,
    provenance: Provenance,
) -> Result<SubgraphRef<'_>, GraphError> {
    let relations = graph
        .relations
        .iter()
        .filter(|r| nodes.contains(&r.source) && nodes.contains(&r.target))
        .cloned()
        .collect();
    Ok(SubgraphRef::new(graph, nodes, relations, provenance))
}

/// Union of two subgraphs of the same parent. The relation set is the induced
/// set of the union, a superset of the two relation lists.
pub fn subgraph_union<'g>(
    a: &SubgraphRef<'g>,
    b: &SubgraphRef<'g>,
) -> Result<SubgraphRef<'g>, GraphError> {
    if !a.same_parent(b) {
        return Err(GraphError::ParentMismatch);
    }
    let nodes: BTreeSet<String> = a.nodes().union(b.nodes()).cloned().collect();
    induced(a.parent(), nodes, Provenance::Unified)
}

/// Merges entity pairs whose text embeddings reach the cosine threshold,
/// using union-find over the ≥threshold pairs of the original graph.
///
/// The canonical survivor of each class is its smallest id; it keeps its own
/// label and type, the longest description in the class (canonical-first on
/// ties), and the union of image refs and metadata. Relations are re-pointed
/// and self-loops produced by merging are dropped.
pub fn merge_duplicate_entities(
    graph: &Graph,
    text_index: &VectorIndex,
    threshold: f64,
) -> Result<Graph, GraphError> {
    if threshold <= 0.0 {
        return Err(GraphError::InvalidThreshold { value: threshold });
    }
    let ids: Vec<&String> = graph.entities.keys().collect();
    for id in &ids {
        if text_index.get(id).is_none() {
            return Err(GraphError::MissingVector {
                id: (*id).clone(),
            });
        }
    }

    let mut find = UnionFind::new(ids.len());
    for i in 0..ids.len() {
        let vi = text_index.get(ids[i]).expect("checked above");
        for (j, id_j) in ids.iter().enumerate().skip(i + 1) {
            let vj = text_index.get(id_j).expect("checked above");
            let score = cosine(vi, vj).map_err(|e| GraphError::Index(e.to_string()))?;
            if score >= threshold {
                find.union(i, j);
            }
        }
    }

    // class root -> member indices, members ascending (ids are sorted already)
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..ids.len() {
        classes.entry(find.root(i)).or_default().push(i);
    }

    let mut canonical_of: BTreeMap<&str, &str> = BTreeMap::new();
    let mut merged_entities = Vec::new();
    for members in classes.values() {
        let canonical_id = ids[members[0]].as_str();
        let mut merged = graph.entities[canonical_id].clone();
        for &m in members {
            canonical_of.insert(ids[m].as_str(), canonical_id);
            if m == members[0] {
                continue;
            }
            let other = &graph.entities[ids[m].as_str()];
            if other.description.len() > merged.description.len() {
                merged.description = other.description.clone();
            }
            for image_ref in &other.image_refs {
                if !merged.image_refs.contains(image_ref) {
                    merged.image_refs.push(image_ref.clone());
                }
            }
            for (key, value) in &other.metadata {
                merged
                    .metadata
                    .entry(key.clone())
                    .or_insert_with(|| value.clone());
            }
        }
        merged_entities.push(merged);
    }

    let relations = graph
        .relations
        .iter()
        .map(|r| Relation {
            source: canonical_of[r.source.as_str()].to_string(),
            target: canonical_of[r.target.as_str()].to_string(),
            predicate: r.predicate.clone(),
            confidence: r.confidence,
            evidence: r.evidence.clone(),
        })
        .collect();

    Graph::build(merged_entities, relations)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn root(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.root(a), self.root(b));
        if ra != rb {
            // smaller root index wins so the canonical member is the smallest id
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Raw model output for LLM triple extraction.
#[derive(Debug, Clone, Deserialize)]
pub struct GraphFragmentBody {
    #[serde(default)]
    pub entities: Vec<FragmentEntity>,
    #[serde(default)]
    pub relations: Vec<FragmentRelation>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FragmentEntity {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "type", default)]
    pub entity_type: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FragmentRelation {
    pub source: String,
    pub target: String,
    pub predicate: String,
    #[serde(default)]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub evidence: Option<String>,
}

/// Extracts a graph fragment from unstructured text via the model gateway.
/// Confidences absent from the model output default to 1.0. Relations naming
/// entities outside the fragment are dropped.
pub fn extract_graph_from_text(
    document: &str,
    gateway: &ModelGateway,
) -> Result<Graph, GatewayError> {
    if document.trim().is_empty() {
        return Ok(Graph::empty());
    }
    let bindings = [("document", document)];
    let parsed = gateway.call_structured(
        crate::gateway::EndpointRole::Chat,
        templates::GRAPH_EXTRACTION,
        &bindings,
        &[],
        SchemaId::GraphFragment,
    )?;
    let ParsedValue::GraphFragment(body) = parsed else {
        unreachable!("schema id fixes the variant");
    };
    fragment_to_graph(body).map_err(|e| GatewayError::SchemaViolation {
        field: "entities".into(),
        message: e.to_string(),
    })
}

pub fn fragment_to_graph(body: GraphFragmentBody) -> Result<Graph, GraphError> {
    let entities: Vec<Entity> = body
        .entities
        .into_iter()
        .map(|e| Entity {
            id: e.id,
            label: e.label,
            description: e.description,
            entity_type: e.entity_type,
            image_refs: Vec::new(),
            metadata: BTreeMap::new(),
        })
        .collect();
    let known: BTreeSet<&str> = entities.iter().map(|e| e.id.as_str()).collect();
    let relations = body
        .relations
        .into_iter()
        .filter(|r| known.contains(r.source.as_str()) && known.contains(r.target.as_str()))
        .map(|r| Relation {
            source: r.source,
            target: r.target,
            predicate: r.predicate,
            confidence: r.confidence.unwrap_or(1.0),
            evidence: r.evidence,
        })
        .collect();
    Graph::build(entities, relations)
}
