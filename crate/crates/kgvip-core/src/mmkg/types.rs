//! Core data types for multimodal knowledge graphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::GraphError;

/// A node of the commonsense graph. Carries text attributes plus zero or
/// more media references (character portraits, stills, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "type", default)]
    pub entity_type: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Entity {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        Entity {
            id: id.into(),
            label: label.into(),
            description: String::new(),
            entity_type: String::new(),
            image_refs: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    fn check(&self) -> Result<(), GraphError> {
        if self.id.is_empty() {
            return Err(GraphError::InvalidEntity {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if self.label.is_empty() {
            return Err(GraphError::InvalidEntity {
                id: self.id.clone(),
                reason: "empty label".into(),
            });
        }
        Ok(())
    }
}

/// A directed, confidence-weighted edge between two entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub source: String,
    pub target: String,
    pub predicate: String,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

fn default_confidence() -> f64 {
    1.0
}

impl Relation {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        predicate: impl Into<String>,
        confidence: f64,
    ) -> Self {
        Relation {
            source: source.into(),
            target: target.into(),
            predicate: predicate.into(),
            confidence,
            evidence: None,
        }
    }

    /// The dedup key: duplicate triples collapse on load keeping max confidence.
    pub fn triple(&self) -> (&str, &str, &str) {
        (&self.source, &self.predicate, &self.target)
    }
}

/// Where a subgraph came from in the retrieval pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TextGuided,
    VisionGuided,
    ScenePruned,
    Unified,
    Adhoc,
}

/// An immutable multimodal knowledge graph.
///
/// Invariants enforced by [`Graph::build`]: every relation endpoint resolves,
/// no duplicate `(source, predicate, target)` triples, no self-loops, entity
/// ids unique and non-empty. Edges are stored directed; traversal helpers are
/// undirected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Graph {
    pub entities: BTreeMap<String, Entity>,
    pub relations: Vec<Relation>,
}

impl Graph {
    pub fn empty() -> Self {
        Graph::default()
    }

    /// Normalizes and validates raw entities/relations into a graph.
    ///
    /// Normalization: self-loops dropped, duplicate triples collapsed to the
    /// max-confidence record (first seen wins ties), relations sorted by
    /// `(source, predicate, target)`.
    pub fn build(entities: Vec<Entity>, relations: Vec<Relation>) -> Result<Self, GraphError> {
        let mut map = BTreeMap::new();
        for entity in entities {
            entity.check()?;
            let id = entity.id.clone();
            if map.insert(id.clone(), entity).is_some() {
                return Err(GraphError::DuplicateId { id });
            }
        }
        Self::build_from_map(map, relations)
    }

    pub(crate) fn build_from_map(
        entities: BTreeMap<String, Entity>,
        relations: Vec<Relation>,
    ) -> Result<Self, GraphError> {
        let mut dedup: BTreeMap<(String, String, String), Relation> = BTreeMap::new();
        for relation in relations {
            if !(0.0..=1.0).contains(&relation.confidence) {
                return Err(GraphError::InvalidRelation {
                    triple: format!("{:?}", relation.triple()),
                    reason: format!("confidence {} outside [0,1]", relation.confidence),
                });
            }
            for endpoint in [&relation.source, &relation.target] {
                if !entities.contains_key(endpoint) {
                    return Err(GraphError::DanglingEndpoint {
                        id: endpoint.clone(),
                    });
                }
            }
            if relation.source == relation.target {
                continue; // self-loops never contribute to retrieval
            }
            let key = (
                relation.source.clone(),
                relation.predicate.clone(),
                relation.target.clone(),
            );
            match dedup.get(&key) {
                Some(existing) if existing.confidence >= relation.confidence => {}
                _ => {
                    dedup.insert(key, relation);
                }
            }
        }
        Ok(Graph {
            entities,
            relations: dedup.into_values().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.relations.len()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    /// Full-graph validation; used after every mutating operation.
    pub fn validate(&self) -> Result<(), GraphError> {
        for entity in self.entities.values() {
            entity.check()?;
        }
        let mut seen = BTreeSet::new();
        for relation in &self.relations {
            for endpoint in [&relation.source, &relation.target] {
                if !self.entities.contains_key(endpoint) {
                    return Err(GraphError::DanglingEndpoint {
                        id: endpoint.clone(),
                    });
                }
            }
            if relation.source == relation.target {
                return Err(GraphError::InvalidRelation {
                    triple: format!("{:?}", relation.triple()),
                    reason: "self-loop".into(),
                });
            }
            if !(0.0..=1.0).contains(&relation.confidence) {
                return Err(GraphError::InvalidRelation {
                    triple: format!("{:?}", relation.triple()),
                    reason: "confidence outside [0,1]".into(),
                });
            }
            if !seen.insert((
                relation.source.clone(),
                relation.predicate.clone(),
                relation.target.clone(),
            )) {
                return Err(GraphError::InvalidRelation {
                    triple: format!("{:?}", relation.triple()),
                    reason: "duplicate triple".into(),
                });
            }
        }
        Ok(())
    }

    /// Undirected adjacency over distinct neighbors (parallel edges collapse).
    pub fn undirected_adjacency(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut adjacency: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for id in self.entities.keys() {
            adjacency.entry(id).or_default();
        }
        for relation in &self.relations {
            adjacency
                .entry(&relation.source)
                .or_default()
                .insert(&relation.target);
            adjacency
                .entry(&relation.target)
                .or_default()
                .insert(&relation.source);
        }
        adjacency
    }

    pub fn image_ref_count(&self) -> usize {
        self.entities.values().map(|e| e.image_refs.len()).sum()
    }
}

/// A node/edge subset of a parent graph, tagged with its pipeline provenance.
#[derive(Debug, Clone)]
pub struct SubgraphRef<'g> {
    parent: &'g Graph,
    nodes: BTreeSet<String>,
    relations: Vec<Relation>,
    provenance: Provenance,
}

impl<'g> SubgraphRef<'g> {
    pub(crate) fn new(
        parent: &'g Graph,
        nodes: BTreeSet<String>,
        relations: Vec<Relation>,
        provenance: Provenance,
    ) -> Self {
        SubgraphRef {
            parent,
            nodes,
            relations,
            provenance,
        }
    }

    pub fn empty(parent: &'g Graph, provenance: Provenance) -> Self {
        SubgraphRef {
            parent,
            nodes: BTreeSet::new(),
            relations: Vec::new(),
            provenance,
        }
    }

    pub fn parent(&self) -> &'g Graph {
        self.parent
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn same_parent(&self, other: &SubgraphRef<'_>) -> bool {
        std::ptr::eq(self.parent, other.parent)
    }

    /// Materializes the subgraph as an owned graph.
    pub fn to_graph(&self) -> Graph {
        let entities = self
            .nodes
            .iter()
            .filter_map(|id| self.parent.entities.get(id))
            .map(|e| (e.id.clone(), e.clone()))
            .collect();
        Graph {
            entities,
            relations: self.relations.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        for id in &self.nodes {
            if !self.parent.contains(id) {
                return Err(GraphError::UnknownNode { id: id.clone() });
            }
        }
        for relation in &self.relations {
            for endpoint in [&relation.source, &relation.target] {
                if !self.nodes.contains(endpoint) {
                    return Err(GraphError::DanglingEndpoint {
                        id: endpoint.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}
