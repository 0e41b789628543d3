//! JSONL persistence for graphs.
//!
//! A graph directory holds `nodes.jsonl` (one entity per line) and
//! `edges.jsonl` (one relation per line), plus an optional `manifest.json`
//! with expected counts. When the manifest is present the loader verifies
//! the counts of the *normalized* graph against it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ops::graph_stats;
use super::{Graph, GraphError};

pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Expected counts for a stored graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub nodes: usize,
    pub edges: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<usize>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, GraphError> {
    let file = fs::File::open(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            path: path.display().to_string(),
            line: index + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Loads a graph directory, normalizes it, and verifies the manifest when present.
pub fn load_graph(dir: &Path) -> Result<Graph, GraphError> {
    let entities = read_jsonl(&dir.join(NODES_FILE))?;
    let relations = read_jsonl(&dir.join(EDGES_FILE))?;
    let graph = Graph::build(entities, relations)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| GraphError::Io {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
        let manifest: GraphManifest =
            serde_json::from_str(&text).map_err(|e| GraphError::Parse {
                path: manifest_path.display().to_string(),
                line: 1,
                message: e.to_string(),
            })?;
        verify_manifest(&graph, &manifest)?;
    }
    Ok(graph)
}

pub fn verify_manifest(graph: &Graph, manifest: &GraphManifest) -> Result<(), GraphError> {
    let stats = graph_stats(graph);
    if stats.nodes != manifest.nodes {
        return Err(GraphError::ManifestMismatch {
            field: "nodes".into(),
            expected: manifest.nodes,
            actual: stats.nodes,
        });
    }
    if stats.edges != manifest.edges {
        return Err(GraphError::ManifestMismatch {
            field: "edges".into(),
            expected: manifest.edges,
            actual: stats.edges,
        });
    }
    if let Some(images) = manifest.images {
        if stats.image_refs != images {
            return Err(GraphError::ManifestMismatch {
                field: "images".into(),
                expected: images,
                actual: stats.image_refs,
            });
        }
    }
    Ok(())
}

/// Writes `nodes.jsonl`, `edges.jsonl`, and a `manifest.json` with the graph's
/// actual counts. `load_graph(save_graph(g)) == g`.
pub fn save_graph(graph: &Graph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|e| GraphError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    write_jsonl(&dir.join(NODES_FILE), graph.entities.values())?;
    write_jsonl(&dir.join(EDGES_FILE), graph.relations.iter())?;

    let stats = graph_stats(graph);
    let manifest = GraphManifest {
        nodes: stats.nodes,
        edges: stats.edges,
        images: Some(stats.image_refs),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    records: impl Iterator<Item = T>,
) -> Result<(), GraphError> {
    let mut file = fs::File::create(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for record in records {
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}
