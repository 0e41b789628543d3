//! Multimodal knowledge graph storage and subgraph algebra.
//!
//! Graphs are immutable after load; every operation returns a new value and
//! re-validates referential integrity. Edges are stored directed, but hop and
//! component traversal is undirected — retrieval cares about relatedness, not
//! direction.

mod ops;
mod store;
mod types;

use thiserror::Error;

pub use ops::{
    extract_graph_from_text, fragment_to_graph, giant_component, graph_stats, induced_subgraph,
    k_hop_subgraph, merge_duplicate_entities, prune_low_confidence, subgraph_union, FragmentEntity,
    FragmentRelation, GraphFragmentBody, GraphStats,
};
pub use store::{load_graph, save_graph, verify_manifest, GraphManifest};
pub use types::{Entity, Graph, Provenance, Relation, SubgraphRef};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("relation endpoint {id:?} does not resolve to an entity")]
    DanglingEndpoint { id: String },
    #[error("duplicate entity id {id:?}")]
    DuplicateId { id: String },
    #[error("invalid entity {id:?}: {reason}")]
    InvalidEntity { id: String, reason: String },
    #[error("invalid relation {triple}: {reason}")]
    InvalidRelation { triple: String, reason: String },
    #[error("unknown node id {id:?}")]
    UnknownNode { id: String },
    #[error("subgraphs have different parent graphs")]
    ParentMismatch,
    #[error("manifest mismatch on {field}: expected {expected}, found {actual}")]
    ManifestMismatch {
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("no embedding vector for entity {id:?}")]
    MissingVector { id: String },
    #[error("merge threshold must be positive, got {value}")]
    InvalidThreshold { value: f64 },
    #[error("vector index error: {0}")]
    Index(String),
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::embedding::{EmbeddingVector, Modality, VectorIndex};

    fn entity(id: &str) -> Entity {
        Entity::new(id, id.to_uppercase())
    }

    fn graph(ids: &[&str], edges: &[(&str, &str)]) -> Graph {
        Graph::build(
            ids.iter().map(|id| entity(id)).collect(),
            edges
                .iter()
                .map(|(s, t)| Relation::new(*s, *t, "rel", 0.9))
                .collect(),
        )
        .unwrap()
    }

    fn ids(set: &BTreeSet<String>) -> Vec<&str> {
        set.iter().map(|s| s.as_str()).collect()
    }

    #[test]
    fn build_rejects_dangling_endpoint() {
        let err = Graph::build(
            vec![entity("a")],
            vec![Relation::new("a", "x9", "rel", 0.5)],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DanglingEndpoint { id } if id == "x9"));
    }

    #[test]
    fn build_rejects_duplicate_id() {
        let err = Graph::build(vec![entity("a"), entity("a")], vec![]).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateId { id } if id == "a"));
    }

    #[test]
    fn build_dedups_triples_keeping_max_confidence() {
        let g = Graph::build(
            vec![entity("a"), entity("b")],
            vec![
                Relation::new("a", "b", "rel", 0.3),
                Relation::new("a", "b", "rel", 0.8),
                Relation::new("a", "b", "other", 0.5),
            ],
        )
        .unwrap();
        assert_eq!(g.edge_count(), 2);
        let main = g.relations.iter().find(|r| r.predicate == "rel").unwrap();
        assert_eq!(main.confidence, 0.8);
    }

    #[test]
    fn build_drops_self_loops() {
        let g = Graph::build(
            vec![entity("a"), entity("b")],
            vec![
                Relation::new("a", "a", "self", 1.0),
                Relation::new("a", "b", "rel", 1.0),
            ],
        )
        .unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn prune_keeps_edges_at_or_above_threshold() {
        let g = Graph::build(
            vec![entity("a"), entity("b"), entity("c")],
            vec![
                Relation::new("a", "b", "weak", 0.2),
                Relation::new("b", "c", "strong", 0.8),
            ],
        )
        .unwrap();
        let pruned = prune_low_confidence(&g, 0.5);
        assert_eq!(pruned.edge_count(), 1);
        assert_eq!(pruned.relations[0].predicate, "strong");
        assert_eq!(prune_low_confidence(&g, 0.0).edge_count(), 2);
        assert_eq!(prune_low_confidence(&g, 1.0).edge_count(), 0);
        assert_eq!(pruned.node_count(), 3, "entities untouched");
    }

    #[test]
    fn giant_component_picks_largest_then_smallest_member() {
        let g = graph(&["a", "b", "c", "x", "y"], &[("a", "b"), ("b", "c"), ("x", "y")]);
        let giant = giant_component(&g);
        assert_eq!(giant.node_count(), 3);
        assert!(giant.contains("a") && giant.contains("c"));

        // tie on size: component containing the smallest id wins
        let tied = graph(&["a", "b", "m", "n"], &[("m", "n"), ("a", "b")]);
        let giant = giant_component(&tied);
        assert!(giant.contains("a"));

        assert_eq!(giant_component(&Graph::empty()).node_count(), 0);
        let connected = graph(&["a", "b"], &[("a", "b")]);
        assert_eq!(giant_component(&connected), connected);
    }

    #[test]
    fn k_hop_basics() {
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("b", "c")]);
        let seeds: BTreeSet<String> = ["a".to_string()].into();
        let zero = k_hop_subgraph(&g, &seeds, 0).unwrap();
        assert_eq!(ids(zero.nodes()), ["a"]);
        assert!(zero.relations().is_empty());

        let one = k_hop_subgraph(&g, &seeds, 1).unwrap();
        assert_eq!(ids(one.nodes()), ["a", "b"]);
        assert_eq!(one.relations().len(), 1);

        let err = k_hop_subgraph(&g, &["zz".to_string()].into(), 1).unwrap_err();
        assert!(matches!(err, GraphError::UnknownNode { id } if id == "zz"));
    }

    #[test]
    fn k_hop_traversal_ignores_direction() {
        // edge points c -> a, but hop from a must still reach c
        let g = graph(&["a", "c"], &[("c", "a")]);
        let hop = k_hop_subgraph(&g, &["a".to_string()].into(), 1).unwrap();
        assert_eq!(ids(hop.nodes()), ["a", "c"]);
    }

    #[test]
    fn induced_subgraph_filters_relations() {
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("a", "c")]);
        let all: BTreeSet<String> = g.entities.keys().cloned().collect();
        assert_eq!(induced_subgraph(&g, &all).unwrap().relations().len(), 3);

        let single: BTreeSet<String> = ["a".to_string()].into();
        assert!(induced_subgraph(&g, &single).unwrap().relations().is_empty());

        let err = induced_subgraph(&g, &["zz".to_string()].into()).unwrap_err();
        assert!(matches!(err, GraphError::UnknownNode { .. }));
    }

    #[test]
    fn union_is_idempotent_and_adds_disjoint_counts() {
        let g = graph(&["a", "b", "c", "d"], &[("a", "b"), ("c", "d")]);
        let left = induced_subgraph(&g, &["a".to_string(), "b".to_string()].into()).unwrap();
        let right = induced_subgraph(&g, &["c".to_string(), "d".to_string()].into()).unwrap();

        let self_union = subgraph_union(&left, &left).unwrap();
        assert_eq!(self_union.nodes(), left.nodes());

        let both = subgraph_union(&left, &right).unwrap();
        assert_eq!(both.nodes().len(), 4);
        assert_eq!(both.relations().len(), 2);
        assert_eq!(both.provenance(), Provenance::Unified);

        let other = graph(&["a", "b"], &[("a", "b")]);
        let foreign = induced_subgraph(&other, &["a".to_string()].into()).unwrap();
        assert!(matches!(
            subgraph_union(&left, &foreign),
            Err(GraphError::ParentMismatch)
        ));
    }

    #[test]
    fn union_includes_bridging_edges() {
        // edge between the two node sets appears even though neither side had it
        let g = graph(&["a", "b"], &[("a", "b")]);
        let left = induced_subgraph(&g, &["a".to_string()].into()).unwrap();
        let right = induced_subgraph(&g, &["b".to_string()].into()).unwrap();
        let both = subgraph_union(&left, &right).unwrap();
        assert_eq!(both.relations().len(), 1);
    }

    #[test]
    fn stats_counts_everything() {
        assert_eq!(
            graph_stats(&Graph::empty()),
            GraphStats {
                nodes: 0,
                edges: 0,
                image_refs: 0,
                components: 0
            }
        );
        let mut a = entity("a");
        a.image_refs = vec!["1.png".into(), "2.png".into()];
        let g = Graph::build(vec![a, entity("b"), entity("c")], vec![Relation::new("a", "b", "rel", 1.0)])
            .unwrap();
        let stats = graph_stats(&g);
        assert_eq!((stats.nodes, stats.edges, stats.image_refs, stats.components), (3, 1, 2, 2));
    }

    fn unit_index(pairs: &[(&str, Vec<f64>)]) -> VectorIndex {
        let mut index = VectorIndex::new(pairs[0].1.len(), Modality::Text);
        for (key, values) in pairs {
            index
                .insert(key.to_string(), EmbeddingVector::new(values.clone()).unwrap())
                .unwrap();
        }
        index
    }

    #[test]
    fn merge_identical_vectors_unions_attributes() {
        let mut a = entity("a");
        a.image_refs = vec!["a.png".into()];
        a.description = "short".into();
        let mut b = entity("b");
        b.image_refs = vec!["b.png".into()];
        b.description = "a longer description".into();
        let g = Graph::build(
            vec![a, b, entity("c")],
            vec![Relation::new("b", "c", "rel", 0.7)],
        )
        .unwrap();
        let index = unit_index(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 0.0]),
            ("c", vec![0.0, 1.0]),
        ]);
        let merged = merge_duplicate_entities(&g, &index, 0.99).unwrap();
        assert_eq!(merged.node_count(), 2);
        let survivor = &merged.entities["a"];
        assert_eq!(survivor.image_refs, vec!["a.png", "b.png"]);
        assert_eq!(survivor.description, "a longer description");
        // relation from b re-pointed to a
        assert_eq!(merged.relations[0].source, "a");
        merged.validate().unwrap();
    }

    #[test]
    fn merge_above_one_threshold_is_identity() {
        let g = graph(&["a", "b"], &[("a", "b")]);
        let index = unit_index(&[("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0])]);
        let merged = merge_duplicate_entities(&g, &index, 1.0 + 1e-9).unwrap();
        assert_eq!(merged, g);
    }

    #[test]
    fn merge_requires_vectors_for_all_entities() {
        let g = graph(&["a", "b"], &[]);
        let index = unit_index(&[("a", vec![1.0, 0.0])]);
        let err = merge_duplicate_entities(&g, &index, 0.9).unwrap_err();
        assert!(matches!(err, GraphError::MissingVector { id } if id == "b"));
    }

    #[test]
    fn merge_drops_self_loops_created_by_merging() {
        let g = graph(&["a", "b"], &[("a", "b")]);
        let index = unit_index(&[("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0])]);
        let merged = merge_duplicate_entities(&g, &index, 0.9).unwrap();
        assert_eq!(merged.node_count(), 1);
        assert_eq!(merged.edge_count(), 0);
    }

    #[test]
    fn fragment_to_graph_defaults_and_drops_unknown_endpoints() {
        let body = GraphFragmentBody {
            entities: vec![
                FragmentEntity {
                    id: "a".into(),
                    label: "A".into(),
                    description: String::new(),
                    entity_type: String::new(),
                },
                FragmentEntity {
                    id: "b".into(),
                    label: "B".into(),
                    description: String::new(),
                    entity_type: String::new(),
                },
            ],
            relations: vec![
                FragmentRelation {
                    source: "a".into(),
                    target: "b".into(),
                    predicate: "rel".into(),
                    confidence: None,
                    evidence: None,
                },
                FragmentRelation {
                    source: "a".into(),
                    target: "ghost".into(),
                    predicate: "rel".into(),
                    confidence: Some(0.5),
                    evidence: None,
                },
            ],
        };
        let g = fragment_to_graph(body).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.relations[0].confidence, 1.0);
    }
}
