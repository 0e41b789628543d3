//! Retrieval-and-fusion engine for multimodal knowledge-graph VQA.
//!
//! The crate stores multimodal commonsense graphs, parses scene graphs from
//! images, runs two-stage (text + vision) retrieval, fuses the retrieved
//! subgraphs with the scene into a unified query-aware graph, refines it
//! with a bounded agent loop, and assembles the answer prompt — with
//! record/replay cassettes so every model-touching path runs offline and
//! deterministically.
//!
//! Module map:
//! - [`mmkg`] — graph types, JSONL persistence, subgraph algebra
//! - [`embedding`] — vectors, cosine/top-k search, the embed cache
//! - [`scene`] — scene-graph generation, validation, crops
//! - [`gateway`] — the single choke-point for model inference
//! - [`retrieval`] — PPR ranking and the two-stage retrieval
//! - [`fusion`] — cross-modal alignment and the unified graph
//! - [`refinement`] — the Expand/Prune/Terminate loop
//! - [`pipeline`] — end-to-end orchestration per query
//! - [`evalkit`] — METEOR, judge/SAS metrics, dataset evaluation
//! - [`fixtures`] — deterministic offline fixtures

pub mod embedding;
pub mod evalkit;
pub mod fixtures;
pub mod fusion;
pub mod gateway;
pub mod mmkg;
pub mod pipeline;
pub mod refinement;
pub mod retrieval;
pub mod scene;

pub use embedding::{cosine, top_k, EmbeddingVector, Modality, VectorIndex};
pub use gateway::{CassetteMode, EndpointRole, ModelGateway};
pub use mmkg::{Entity, Graph, GraphStats, Relation, SubgraphRef};
pub use pipeline::{AnswerRecord, IndexBundle, PipelineConfig};
pub use scene::{SceneGraph, MediaResolver};
