//! Shared test support: independent oracles and randomized generators.
//!
//! Every oracle here is written against the operation contracts directly —
//! dense linear algebra, queue-based BFS, union-find — and stays independent
//! of the implementation paths it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgvip_core::embedding::{EmbeddingVector, Modality, VectorIndex};
use kgvip_core::gateway::{EndpointRole, GatewayError, ModelRequest, Transport};
use kgvip_core::mmkg::{Entity, Graph, Relation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Random structures
// ---------------------------------------------------------------------------

pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_edges: usize) -> Graph {
    let node_count = rng.gen_range(1..=max_nodes);
    let entities: Vec<Entity> = (0..node_count)
        .map(|i| Entity::new(format!("n{i:03}"), format!("Node {i}")))
        .collect();
    let ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
    let edge_count = rng.gen_range(0..=max_edges);
    let mut relations = Vec::new();
    for _ in 0..edge_count {
        let source = ids[rng.gen_range(0..ids.len())].clone();
        let target = ids[rng.gen_range(0..ids.len())].clone();
        if source == target {
            continue;
        }
        let predicate = format!("p{}", rng.gen_range(0..4));
        relations.push(Relation::new(source, target, predicate, rng.gen_range(0.0..=1.0)));
    }
    Graph::build(entities, relations).expect("random graph is valid")
}

pub fn random_unit_values(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if values.iter().map(|v| v * v).sum::<f64>() > 1e-6 {
            return values;
        }
    }
}

pub fn random_index(rng: &mut ChaCha8Rng, size: usize, dim: usize) -> VectorIndex {
    let mut index = VectorIndex::new(dim, Modality::Text);
    for i in 0..size {
        let vector = EmbeddingVector::new(random_unit_values(rng, dim)).unwrap();
        index.insert(format!("k{i:04}"), vector).unwrap();
    }
    index
}

pub fn random_seeds(rng: &mut ChaCha8Rng, graph: &Graph, max: usize) -> BTreeSet<String> {
    let ids: Vec<&String> = graph.entities.keys().collect();
    let count = rng.gen_range(1..=max.min(ids.len()));
    let mut chosen: Vec<&String> = ids.clone();
    chosen.shuffle(rng);
    chosen.into_iter().take(count).cloned().collect()
}

// ---------------------------------------------------------------------------
// Graph oracles
// ---------------------------------------------------------------------------

/// Queue-based multi-source BFS to depth k over undirected edges.
pub fn bfs_oracle(graph: &Graph, seeds: &BTreeSet<String>, k: usize) -> BTreeSet<String> {
    let adjacency = graph.undirected_adjacency();
    let mut distance: BTreeMap<&str, usize> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for seed in seeds {
        distance.insert(seed.as_str(), 0);
        queue.push_back(seed.as_str());
    }
    while let Some(node) = queue.pop_front() {
        let d = distance[node];
        if d == k {
            continue;
        }
        if let Some(neighbors) = adjacency.get(node) {
            for &next in neighbors {
                if !distance.contains_key(next) {
                    distance.insert(next, d + 1);
                    queue.push_back(next);
                }
            }
        }
    }
    distance.keys().map(|s| s.to_string()).collect()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
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
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Union-find components, each sorted; the "giant" pick mirrors the contract:
/// largest, ties by smallest member id.
pub fn union_find_components(graph: &Graph) -> Vec<Vec<String>> {
    let ids: Vec<&String> = graph.entities.keys().collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut sets = DisjointSet::new(ids.len());
    for relation in &graph.relations {
        sets.union(index[relation.source.as_str()], index[relation.target.as_str()]);
    }
    let mut components: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        components.entry(sets.root(i)).or_default().push((*id).clone());
    }
    components.into_values().collect()
}

pub fn union_find_giant(graph: &Graph) -> BTreeSet<String> {
    union_find_components(graph)
        .into_iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b[0].cmp(&a[0])))
        .map(|component| component.into_iter().collect())
        .unwrap_or_default()
}

/// Dense solve of the personalized PageRank system
/// `(I − (1−c)·W)·x = c·s`, where W is the column-stochastic undirected walk
/// with dangling columns replaced by the seed distribution. Gaussian
/// elimination with partial pivoting; n ≤ a few hundred.
pub fn ppr_dense_oracle(
    graph: &Graph,
    seeds: &BTreeSet<String>,
    restart: f64,
) -> BTreeMap<String, f64> {
    let ids: Vec<&String> = graph.entities.keys().collect();
    let n = ids.len();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let adjacency = graph.undirected_adjacency();

    let mut s = vec![0.0; n];
    for seed in seeds {
        s[index[seed.as_str()]] = 1.0 / seeds.len() as f64;
    }

    // w[v][u]: probability of stepping u -> v
    let mut w = vec![vec![0.0; n]; n];
    for (u, id) in ids.iter().enumerate() {
        let neighbors = &adjacency[id.as_str()];
        if neighbors.is_empty() {
            for v in 0..n {
                w[v][u] = s[v];
            }
        } else {
            let share = 1.0 / neighbors.len() as f64;
            for neighbor in neighbors {
                w[index[neighbor]][u] = share;
            }
        }
    }

    // a = I − (1−c)·W, augmented with b = c·s
    let mut a = vec![vec![0.0; n + 1]; n];
    for (v, row) in a.iter_mut().enumerate() {
        for u in 0..n {
            row[u] = f64::from(u8::from(u == v)) - (1.0 - restart) * w[v][u];
        }
        row[n] = restart * s[v];
    }

    for column in 0..n {
        let pivot = (column..n)
            .max_by(|&i, &j| a[i][column].abs().partial_cmp(&a[j][column].abs()).unwrap())
            .unwrap();
        a.swap(column, pivot);
        let head = a[column][column];
        assert!(head.abs() > 1e-12, "singular PPR system");
        for entry in a[column].iter_mut() {
            *entry /= head;
        }
        for row in 0..n {
            if row != column && a[row][column].abs() > 0.0 {
                let factor = a[row][column];
                let pivot_row = a[column].clone();
                for (entry, pivot) in a[row][column..=n].iter_mut().zip(&pivot_row[column..=n]) {
                    *entry -= factor * pivot;
                }
            }
        }
    }

    ids.iter()
        .enumerate()
        .map(|(i, id)| ((*id).clone(), a[i][n]))
        .collect()
}

/// Full-sort top-k oracle: descending score, ascending key on ties.
pub fn exhaustive_top_k(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = index
        .iter()
        .map(|(key, vector)| {
            let score = query
                .values()
                .iter()
                .zip(vector.values())
                .map(|(a, b)| a * b)
                .sum();
            (key.clone(), score)
        })
        .collect();
    scored.sort_by(|(ka, sa), (kb, sb)| sb.partial_cmp(sa).unwrap().then_with(|| ka.cmp(kb)));
    scored.into_iter().take(k).collect()
}

// ---------------------------------------------------------------------------
// Fuzz transport: deterministic noisy model
// ---------------------------------------------------------------------------

/// Seeded transport producing plausible-but-noisy model bodies: scene graphs
/// with occasional ghost relations, keep-lists naming unknown ids, refinement
/// actions over real and bogus nodes, random embeddings, and a sprinkle of
/// outright malformed JSON.
pub struct FuzzTransport {
    rng: Mutex<ChaCha8Rng>,
    pub dim: usize,
    pub width: u32,
    pub height: u32,
    pub node_pool: Vec<String>,
}

impl FuzzTransport {
    pub fn new(seed: u64, dim: usize, width: u32, height: u32, node_pool: Vec<String>) -> Self {
        FuzzTransport {
            rng: Mutex::new(rng(seed)),
            dim,
            width,
            height,
            node_pool,
        }
    }

    fn scene_body(&self, rng: &mut ChaCha8Rng) -> String {
        let count = rng.gen_range(0..5);
        let entities: Vec<serde_json::Value> = (0..count)
            .map(|i| {
                let x1 = rng.gen_range(0..self.width - 1);
                let y1 = rng.gen_range(0..self.height - 1);
                let x2 = rng.gen_range(x1 + 1..=self.width);
                let y2 = rng.gen_range(y1 + 1..=self.height);
                let category = ["person", "object", "animal", "other"][rng.gen_range(0..4)];
                serde_json::json!({
                    "entity_id": format!("e{i}"),
                    "name": format!("thing{i}"),
                    "category": category,
                    "bbox_px": [x1, y1, x2, y2],
                    "confidence": rng.gen_range(0.0..=1.0),
                })
            })
            .collect();
        let relations: Vec<serde_json::Value> = (0..rng.gen_range(0..4))
            .map(|_| {
                // sometimes a ghost endpoint, which the parser must drop
                let subject = if rng.gen_bool(0.8) && count > 0 {
                    format!("e{}", rng.gen_range(0..count))
                } else {
                    "ghost".to_string()
                };
                let object = if count > 0 {
                    format!("e{}", rng.gen_range(0..count))
                } else {
                    "ghost2".to_string()
                };
                serde_json::json!({
                    "subject_id": subject,
                    "predicate": "near",
                    "object_id": object,
                    "confidence": rng.gen_range(0.0..=1.0),
                })
            })
            .collect();
        serde_json::json!({ "entities": entities, "relations": relations }).to_string()
    }

    fn keep_body(&self, rng: &mut ChaCha8Rng) -> String {
        let mut keeps = Vec::new();
        for i in 0..5 {
            if rng.gen_bool(0.5) {
                keeps.push(format!("e{i}"));
            }
        }
        if rng.gen_bool(0.3) {
            keeps.push("not_a_scene_id".to_string());
        }
        serde_json::json!({
            "keep_entities": keeps,
            "keep_relations": [{"s": "e0", "p": "near", "o": "e1"}]
        })
        .to_string()
    }

    fn refinement_body(&self, rng: &mut ChaCha8Rng) -> String {
        let recommendation = ["Expand", "Prune", "Terminate"][rng.gen_range(0..3)];
        let pick = |rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..rng.gen_range(0..3))
                .map(|_| {
                    if rng.gen_bool(0.7) && !self.node_pool.is_empty() {
                        self.node_pool[rng.gen_range(0..self.node_pool.len())].clone()
                    } else {
                        "bogus_node".to_string()
                    }
                })
                .collect()
        };
        serde_json::json!({
            "analysis": "fuzz",
            "recommendation": recommendation,
            "nodes_to_expand": pick(rng),
            "nodes_to_prune": pick(rng),
            "reason": "fuzz",
            "confidence": rng.gen_range(0.0..=1.0),
        })
        .to_string()
    }

    fn embedding_b(&self, rng: &mut ChaCha8Rng) -> String {
        let values = random_unit_values(rng, self.dim);
        serde_json::json!({ "dim": self.dim, "values": values }).to_string()
    }
}

impl Transport for FuzzTransport {
    fn send(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        let mut rng = self.rng.lock().unwrap();
        // occasional garbage exercises the retry/fallback paths
        if rng.gen_bool(0.05) {
            return Ok("```\nnot json at all\n```".to_string());
        }
        let body = match request.role {
            EndpointRole::TextEmbed | EndpointRole::ImageEmbed => self.embedding_b(&mut rng),
            EndpointRole::Judge => serde_json::json!({ "score": rng.gen_range(0..=100) }).to_string(),
            EndpointRole::Chat => {
                if request.prompt.contains("entity mention extractor") {
                    let mentions: Vec<String> =
                        (0..rng.gen_range(0..3)).map(|i| format!("mention{i}")).collect();
                    serde_json::json!({ "entities": mentions }).to_string()
                } else {
                    "fuzz answer".to_string()
                }
            }
            EndpointRole::VisionChat => {
                if request.prompt.contains("visual grounding + relation extraction") {
                    self.scene_body(&mut rng)
                } else if request.prompt.contains("image-graph entities/relations") {
                    self.keep_body(&mut rng)
                } else if request.prompt.contains("knowledge graph analysis expert") {
                    self.refinement_body(&mut rng)
                } else {
                    "fuzz answer".to_string()
                }
            }
        };
        Ok(body)
    }
}
