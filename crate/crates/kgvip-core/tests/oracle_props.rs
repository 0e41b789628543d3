//! Property and oracle tests for the graph store and vector index.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::Rng;

use kgvip_core::embedding::{cosine, top_k, EmbeddingVector, Modality, VectorIndex};
use kgvip_core::mmkg::{
    giant_component, graph_stats, induced_subgraph, k_hop_subgraph, load_graph,
    merge_duplicate_entities, prune_low_confidence, save_graph, subgraph_union, Entity, Graph,
    Relation,
};

use common::{random_graph, random_seeds, random_unit_values, rng, union_find_giant};

// ---------------------------------------------------------------------------
// merge oracle
// ---------------------------------------------------------------------------

/// Independent oracle: union-find over the brute-force ≥threshold cosine
/// pairs, entirely separate from the store's merge implementation.
fn merge_classes_oracle(index: &VectorIndex, threshold: f64) -> Vec<BTreeSet<String>> {
    let keys: Vec<&String> = index.keys().collect();
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..keys.len() {
        for j in (i + 1)..keys.len() {
            let score = cosine(index.get(keys[i]).unwrap(), index.get(keys[j]).unwrap()).unwrap();
            if score >= threshold {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut classes: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        classes
            .entry(root(&mut parent, i))
            .or_default()
            .insert((*key).clone());
    }
    classes.into_values().collect()
}

#[test]
fn merge_matches_union_find_oracle_on_random_graphs() {
    let mut rng = rng(42);
    for _ in 0..30 {
        let graph = random_graph(&mut rng, 20, 30);
        let dim = 4;
        let mut index = VectorIndex::new(dim, Modality::Text);
        for id in graph.entities.keys() {
            // few distinct directions so collisions actually happen
            let bucket = rng.gen_range(0..5) as f64;
            let mut values = vec![0.0; dim];
            values[bucket as usize % dim] = 1.0;
            values[(bucket as usize + 1) % dim] = rng.gen_range(0.0..0.3);
            index
                .insert(id.clone(), EmbeddingVector::new(values).unwrap())
                .unwrap();
        }
        let threshold = 0.9;
        let merged = merge_duplicate_entities(&graph, &index, threshold).unwrap();
        merged.validate().unwrap();

        let classes = merge_classes_oracle(&index, threshold);
        assert_eq!(merged.node_count(), classes.len());
        // survivors are exactly the smallest id of each class
        let expected: BTreeSet<String> = classes
            .iter()
            .map(|class| class.iter().next().unwrap().clone())
            .collect();
        let actual: BTreeSet<String> = merged.entities.keys().cloned().collect();
        assert_eq!(actual, expected);
    }
}

// ---------------------------------------------------------------------------
// component / hop / union / prune laws
// ---------------------------------------------------------------------------

#[test]
fn giant_component_matches_union_find_oracle() {
    let mut rng = rng(7);
    for _ in 0..50 {
        let graph = random_graph(&mut rng, 30, 25);
        let giant = giant_component(&graph);
        let expected = union_find_giant(&graph);
        let actual: BTreeSet<String> = giant.entities.keys().cloned().collect();
        assert_eq!(actual, expected);
        assert_eq!(graph_stats(&giant).components, usize::from(!giant.entities.is_empty()));
    }
}

#[test]
fn k_hop_is_monotone_in_k() {
    let mut rng = rng(11);
    for _ in 0..30 {
        let graph = random_graph(&mut rng, 25, 40);
        let seeds = random_seeds(&mut rng, &graph, 3);
        let mut previous: BTreeSet<String> = BTreeSet::new();
        for k in 0..5 {
            let hop = k_hop_subgraph(&graph, &seeds, k).unwrap();
            assert!(previous.is_subset(hop.nodes()), "k={k}");
            previous = hop.nodes().clone();
        }
    }
}

#[test]
fn prune_thresholds_nest() {
    let mut rng = rng(13);
    for _ in 0..20 {
        let graph = random_graph(&mut rng, 15, 40);
        let loose = prune_low_confidence(&graph, 0.3);
        let tight = prune_low_confidence(&graph, 0.7);
        let loose_triples: BTreeSet<_> = loose
            .relations
            .iter()
            .map(|r| (r.source.clone(), r.predicate.clone(), r.target.clone()))
            .collect();
        for relation in &tight.relations {
            assert!(loose_triples.contains(&(
                relation.source.clone(),
                relation.predicate.clone(),
                relation.target.clone()
            )));
        }
    }
}

#[test]
fn union_laws_on_node_sets() {
    let mut rng = rng(17);
    for _ in 0..20 {
        let graph = random_graph(&mut rng, 20, 30);
        let a_nodes = random_seeds(&mut rng, &graph, 8);
        let b_nodes = random_seeds(&mut rng, &graph, 8);
        let c_nodes = random_seeds(&mut rng, &graph, 8);
        let a = induced_subgraph(&graph, &a_nodes).unwrap();
        let b = induced_subgraph(&graph, &b_nodes).unwrap();
        let c = induced_subgraph(&graph, &c_nodes).unwrap();

        let ab = subgraph_union(&a, &b).unwrap();
        let ba = subgraph_union(&b, &a).unwrap();
        assert_eq!(ab.nodes(), ba.nodes());

        let ab_c = subgraph_union(&ab, &c).unwrap();
        let bc = subgraph_union(&b, &c).unwrap();
        let a_bc = subgraph_union(&a, &bc).unwrap();
        assert_eq!(ab_c.nodes(), a_bc.nodes());

        let aa = subgraph_union(&a, &a).unwrap();
        assert_eq!(aa.nodes(), a.nodes());

        // relation set is the induced oracle of the union
        let expected: BTreeSet<(String, String, String)> = graph
            .relations
            .iter()
            .filter(|r| ab.nodes().contains(&r.source) && ab.nodes().contains(&r.target))
            .map(|r| (r.source.clone(), r.predicate.clone(), r.target.clone()))
            .collect();
        let actual: BTreeSet<(String, String, String)> = ab
            .relations()
            .iter()
            .map(|r| (r.source.clone(), r.predicate.clone(), r.target.clone()))
            .collect();
        assert_eq!(actual, expected);
    }
}

// ---------------------------------------------------------------------------
// persistence round trip
// ---------------------------------------------------------------------------

fn arbitrary_entity(index: usize) -> impl Strategy<Value = Entity> {
    (
        "[a-z]{1,8}",
        proptest::collection::vec("[a-z0-9 .]{0,12}", 0..3),
        proptest::collection::btree_map("[a-z]{1,4}", "[a-z0-9]{0,6}", 0..3),
    )
        .prop_map(move |(label, image_refs, metadata)| {
            let mut entity = Entity::new(format!("id{index:02}"), label);
            entity.description = format!("entity number {index}");
            entity.entity_type = "thing".into();
            entity.image_refs = image_refs;
            entity.metadata = metadata;
            entity
        })
}

fn arbitrary_graph() -> impl Strategy<Value = Graph> {
    (1usize..10).prop_flat_map(|n| {
        let entities: Vec<_> = (0..n).map(arbitrary_entity).collect();
        let relations = proptest::collection::vec(
            (0..n, 0..n, "[a-z]{1,6}", 0.0f64..=1.0),
            0..15,
        );
        (entities, relations).prop_map(|(entities, raw)| {
            let relations = raw
                .into_iter()
                .map(|(s, t, predicate, confidence)| {
                    Relation::new(
                        format!("id{s:02}"),
                        format!("id{t:02}"),
                        predicate,
                        confidence,
                    )
                })
                .collect();
            Graph::build(entities, relations).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_round_trip(graph in arbitrary_graph()) {
        let dir = tempfile::tempdir().unwrap();
        save_graph(&graph, dir.path()).unwrap();
        let loaded = load_graph(dir.path()).unwrap();
        prop_assert_eq!(loaded, graph);
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        a in proptest::collection::vec(-10.0f64..10.0, 4),
        b in proptest::collection::vec(-10.0f64..10.0, 4),
        scale in 0.1f64..100.0,
    ) {
        let va = EmbeddingVector::new(a.clone()).unwrap();
        let vb = EmbeddingVector::new(b.clone()).unwrap();
        let ab = cosine(&va, &vb).unwrap();
        let ba = cosine(&vb, &va).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);

        let scaled = EmbeddingVector::new(a.iter().map(|v| v * scale).collect()).unwrap();
        let rescored = cosine(&scaled, &vb).unwrap();
        prop_assert!((ab - rescored).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
    }
}

#[test]
fn save_writes_one_line_per_record() {
    let graph = Graph::build(
        vec![Entity::new("a", "A"), Entity::new("b", "B")],
        vec![Relation::new("a", "b", "rel", 1.0)],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_graph(&graph, dir.path()).unwrap();
    let nodes = std::fs::read_to_string(dir.path().join("nodes.jsonl")).unwrap();
    let edges = std::fs::read_to_string(dir.path().join("edges.jsonl")).unwrap();
    assert_eq!(nodes.lines().count(), 2);
    assert_eq!(edges.lines().count(), 1);
}

#[test]
fn save_to_unwritable_path_fails() {
    let graph = Graph::empty();
    let err = save_graph(&graph, std::path::Path::new("/proc/nope/graph")).unwrap_err();
    assert!(err.to_string().contains("i/o error"));
}

#[test]
fn empty_files_load_as_empty_graph() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("nodes.jsonl"), "").unwrap();
    std::fs::write(dir.path().join("edges.jsonl"), "").unwrap();
    let graph = load_graph(dir.path()).unwrap();
    assert_eq!(graph.node_count(), 0);
    assert_eq!(graph.edge_count(), 0);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("nodes.jsonl"),
        "{\"id\":\"a\",\"label\":\"A\"}\nbroken line\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("edges.jsonl"), "").unwrap();
    let err = load_graph(dir.path()).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

// ---------------------------------------------------------------------------
// scene parsing rejects or repairs every malformed input
// ---------------------------------------------------------------------------

fn arbitrary_scene_json() -> impl Strategy<Value = String> {
    let entity = (
        proptest::option::of("e[0-9]{1,2}"),
        "[a-z]{1,6}",
        prop_oneof![
            Just("person".to_string()),
            Just("object".to_string()),
            Just("animal".to_string()),
            Just("other".to_string()),
            "[a-z]{3,8}".prop_map(|s| s), // often invalid
        ],
        proptest::collection::vec(-50i64..700, 4),
        -0.5f64..1.5,
    );
    let relation = ("e[0-9]{1,2}", "[a-z]{1,5}", "e[0-9]{1,2}", -0.5f64..1.5);
    (
        proptest::collection::vec(entity, 0..6),
        proptest::collection::vec(relation, 0..6),
    )
        .prop_map(|(entities, relations)| {
            let entities: Vec<serde_json::Value> = entities
                .into_iter()
                .enumerate()
                .map(|(i, (id, name, category, bbox, confidence))| {
                    serde_json::json!({
                        // a duplicate id sneaks in when the option is None
                        "entity_id": id.unwrap_or_else(|| format!("e{}", i / 2)),
                        "name": name,
                        "category": category,
                        "bbox_px": bbox,
                        "confidence": confidence,
                    })
                })
                .collect();
            let relations: Vec<serde_json::Value> = relations
                .into_iter()
                .map(|(s, p, o, confidence)| {
                    serde_json::json!({
                        "subject_id": s,
                        "predicate": p,
                        "object_id": o,
                        "confidence": confidence,
                    })
                })
                .collect();
            serde_json::json!({ "entities": entities, "relations": relations }).to_string()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Every accepted scene graph satisfies the bbox and referential
    /// invariants; everything else is rejected (never silently accepted).
    #[test]
    fn malformed_scenes_are_rejected_or_repaired(body in arbitrary_scene_json()) {
        // rejection is a fine outcome for malformed input
        if let Ok(parsed) = kgvip_core::scene::parse_scene_graph(&body, 640, 480) {
            parsed.graph.validate().expect("accepted scene must validate");
            let ids = parsed.graph.entity_ids();
            for relation in &parsed.graph.relations {
                prop_assert!(ids.contains(relation.subject_id.as_str()));
                prop_assert!(ids.contains(relation.object_id.as_str()));
            }
        }
    }

    /// Arbitrary byte soup never panics the parser.
    #[test]
    fn parser_never_panics(garbage in "\\PC{0,80}") {
        let _ = kgvip_core::scene::parse_scene_graph(&garbage, 64, 48);
    }
}

// ---------------------------------------------------------------------------
// top-k prefix law
// ---------------------------------------------------------------------------

#[test]
fn top_k_is_a_prefix_of_the_full_ranking() {
    let mut rng = rng(23);
    let index = common::random_index(&mut rng, 120, 8);
    let query = EmbeddingVector::new(random_unit_values(&mut rng, 8)).unwrap();
    let full = top_k(&index, &query, index.len()).unwrap();
    for k in [0, 1, 5, 60, 119, 120, 500] {
        let partial = top_k(&index, &query, k).unwrap();
        assert_eq!(partial.len(), k.min(index.len()));
        assert_eq!(partial[..], full[..partial.len()]);
    }
}

#[test]
fn zero_vectors_rank_last() {
    let mut index = VectorIndex::new(2, Modality::Text);
    index
        .insert("zero".into(), EmbeddingVector::zero(2))
        .unwrap();
    index
        .insert("hit".into(), EmbeddingVector::new(vec![1.0, 0.0]).unwrap())
        .unwrap();
    let hits = top_k(&index, &EmbeddingVector::new(vec![1.0, 0.0]).unwrap(), 2).unwrap();
    assert_eq!(hits[0].0, "hit");
    assert_eq!(hits[1].0, "zero");
    assert_eq!(hits[1].1, 0.0);
}
