//! Shared generators for the criterion benches.

use kgvip_core::embedding::{EmbeddingVector, Modality, VectorIndex};
use kgvip_core::mmkg::{Entity, Graph, Relation};

/// Deterministic pseudo-random graph: a ring for connectivity plus hashed
/// chords, sized for ranking benchmarks.
pub fn bench_graph(nodes: usize, extra_edges: usize) -> Graph {
    let entities: Vec<Entity> = (0..nodes)
        .map(|i| Entity::new(format!("n{i:05}"), format!("Node {i}")))
        .collect();
    let id = |i: usize| format!("n{:05}", i % nodes);
    let mut relations: Vec<Relation> = (0..nodes)
        .map(|i| Relation::new(id(i), id(i + 1), "ring", 0.9))
        .collect();
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for _ in 0..extra_edges {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let a = (state >> 33) as usize % nodes;
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let b = (state >> 33) as usize % nodes;
        if a != b {
            relations.push(Relation::new(id(a), id(b), "chord", 0.7));
        }
    }
    Graph::build(entities, relations).expect("bench graph is valid")
}

/// Deterministic vector index for search benchmarks.
pub fn bench_index(size: usize, dim: usize) -> VectorIndex {
    let mut index = VectorIndex::new(dim, Modality::Text);
    let mut state = 0x853c_49e6_748f_ea9bu64;
    for i in 0..size {
        let values: Vec<f64> = (0..dim)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        index
            .insert(format!("v{i:05}"), EmbeddingVector::new(values).unwrap())
            .unwrap();
    }
    index
}
