//! Run configuration: flags > config file > environment > defaults.
//!
//! Every knob lives in [`PartialConfig`]; three partials (one per source)
//! merge field-wise into the fully resolved [`RunConfig`] before any stage
//! runs. The config file is TOML or JSON, chosen by extension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kgvip_core::gateway::{EndpointConfig, EndpointRole};
use kgvip_core::pipeline::{PipelineConfig, PruningMode, Toggles};
use kgvip_core::retrieval::{PprParams, RetrievalConfig, VisionMode};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub graph: Option<PathBuf>,
    pub text_index: Option<PathBuf>,
    pub image_index: Option<PathBuf>,
    pub dim: Option<usize>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub trace: Option<bool>,

    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub refine_steps: Option<usize>,
    pub hop_radius: Option<usize>,
    pub text_keep: Option<usize>,
    pub vision_keep: Option<usize>,
    pub seed_link_threshold: Option<f64>,
    pub vision_mode: Option<String>,
    pub pruning: Option<String>,
    pub fusion: Option<bool>,
    pub refinement: Option<bool>,
    pub restart: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,

    pub record: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub retry_budget: Option<usize>,
    pub in_flight: Option<usize>,

    pub api_key: Option<String>,
    pub endpoint_chat: Option<String>,
    pub endpoint_vision_chat: Option<String>,
    pub endpoint_text_embed: Option<String>,
    pub endpoint_image_embed: Option<String>,
    pub endpoint_judge: Option<String>,
    pub endpoint_sas: Option<String>,

    pub judge: Option<bool>,
    pub sas: Option<bool>,
}

macro_rules! merge_fields {
    ($first:expr, $second:expr, { $($field:ident),* $(,)? }) => {{
        PartialConfig {
            $($field: $first.$field.clone().or($second.$field.clone()),)*
        }
    }};
}

impl PartialConfig {
    /// Field-wise merge preferring `self`.
    pub fn or(&self, lower: &PartialConfig) -> PartialConfig {
        merge_fields!(self, lower, {
            graph, text_index, image_index, dim, out, jobs, trace,
            alpha, tau, refine_steps, hop_radius, text_keep, vision_keep,
            seed_link_threshold, vision_mode, pruning, fusion, refinement,
            restart, tolerance, max_iterations,
            record, replay, temperature, max_tokens, retry_budget, in_flight,
            api_key, endpoint_chat, endpoint_vision_chat, endpoint_text_embed,
            endpoint_image_embed, endpoint_judge, endpoint_sas, judge, sas,
        })
    }

    pub fn from_file(path: &Path) -> Result<PartialConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let extension = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match extension {
            "json" => serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("config {}: {e}", path.display()))),
            _ => toml::from_str(&text)
                .map_err(|e| CliError::Data(format!("config {}: {e}", path.display()))),
        }
    }

    pub fn from_env() -> PartialConfig {
        let get = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        PartialConfig {
            api_key: get("KGVIP_API_KEY"),
            endpoint_chat: get("KGVIP_ENDPOINT_CHAT"),
            endpoint_vision_chat: get("KGVIP_ENDPOINT_VISION_CHAT"),
            endpoint_text_embed: get("KGVIP_ENDPOINT_TEXT_EMBED"),
            endpoint_image_embed: get("KGVIP_ENDPOINT_IMAGE_EMBED"),
            endpoint_judge: get("KGVIP_ENDPOINT_JUDGE"),
            endpoint_sas: get("KGVIP_ENDPOINT_SAS"),
            jobs: get("KGVIP_JOBS").and_then(|v| v.parse().ok()),
            ..PartialConfig::default()
        }
    }
}

/// Fully resolved configuration; every field has a value.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub text_index: Option<PathBuf>,
    pub image_index: Option<PathBuf>,
    pub dim: usize,
    pub out: PathBuf,
    pub jobs: usize,
    pub trace: bool,
    pub pipeline: PipelineConfig,
    pub record: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry_budget: usize,
    pub in_flight: usize,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub endpoints: BTreeMap<String, String>,
    pub judge: bool,
    pub sas: bool,
}

fn parse_vision_mode(value: &str) -> Result<VisionMode, CliError> {
    match value {
        "v2v" => Ok(VisionMode::V2v),
        "v2t" => Ok(VisionMode::V2t),
        other => Err(CliError::Usage(format!(
            "vision_mode must be v2v or v2t, got {other:?}"
        ))),
    }
}

fn parse_pruning(value: &str) -> Result<PruningMode, CliError> {
    match value {
        "graph" => Ok(PruningMode::Graph),
        "query" => Ok(PruningMode::Query),
        "off" => Ok(PruningMode::Off),
        other => Err(CliError::Usage(format!(
            "pruning must be graph, query, or off, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Resolves flag, file, and environment partials over the defaults.
    pub fn resolve(
        flags: &PartialConfig,
        file: &PartialConfig,
        env: &PartialConfig,
    ) -> Result<RunConfig, CliError> {
        let merged = flags.or(file).or(env);
        let defaults = PipelineConfig::default();

        let mut endpoints = BTreeMap::new();
        for (key, value) in [
            ("chat", &merged.endpoint_chat),
            ("vision_chat", &merged.endpoint_vision_chat),
            ("text_embed", &merged.endpoint_text_embed),
            ("image_embed", &merged.endpoint_image_embed),
            ("judge", &merged.endpoint_judge),
            ("sas", &merged.endpoint_sas),
        ] {
            if let Some(value) = value {
                endpoints.insert(key.to_string(), value.clone());
            }
        }

        Ok(RunConfig {
            graph: merged.graph.clone(),
            text_index: merged.text_index.clone(),
            image_index: merged.image_index.clone(),
            dim: merged.dim.unwrap_or(8),
            out: merged.out.clone().unwrap_or_else(|| PathBuf::from("run_out")),
            jobs: merged.jobs.unwrap_or(4).max(1),
            trace: merged.trace.unwrap_or(false),
            pipeline: PipelineConfig {
                retrieval: RetrievalConfig {
                    hop_radius: merged.hop_radius.unwrap_or(defaults.retrieval.hop_radius),
                    text_keep: merged.text_keep.unwrap_or(defaults.retrieval.text_keep),
                    vision_keep: merged.vision_keep.unwrap_or(defaults.retrieval.vision_keep),
                    seed_link_threshold: merged
                        .seed_link_threshold
                        .unwrap_or(defaults.retrieval.seed_link_threshold),
                    vision_mode: match &merged.vision_mode {
                        Some(value) => parse_vision_mode(value)?,
                        None => defaults.retrieval.vision_mode,
                    },
                    ppr: PprParams {
                        restart: merged.restart.unwrap_or(defaults.retrieval.ppr.restart),
                        tolerance: merged.tolerance.unwrap_or(defaults.retrieval.ppr.tolerance),
                        max_iterations: merged
                            .max_iterations
                            .unwrap_or(defaults.retrieval.ppr.max_iterations),
                    },
                },
                alpha: merged.alpha.unwrap_or(defaults.alpha),
                tau: merged.tau.unwrap_or(defaults.tau),
                refine_steps: merged.refine_steps.unwrap_or(defaults.refine_steps),
                toggles: Toggles {
                    pruning: match &merged.pruning {
                        Some(value) => parse_pruning(value)?,
                        None => defaults.toggles.pruning,
                    },
                    fusion: merged.fusion.unwrap_or(defaults.toggles.fusion),
                    refinement: merged.refinement.unwrap_or(defaults.toggles.refinement),
                },
            },
            record: merged.record.clone(),
            replay: merged.replay.clone(),
            temperature: merged.temperature.unwrap_or(0.0),
            max_tokens: merged.max_tokens.unwrap_or(1024),
            retry_budget: merged.retry_budget.unwrap_or(2),
            in_flight: merged.in_flight.unwrap_or(4),
            api_key: merged.api_key.clone(),
            endpoints,
            judge: merged.judge.unwrap_or(false),
            sas: merged.sas.unwrap_or(false),
        })
    }

    pub fn endpoint_config(&self) -> EndpointConfig {
        let mut endpoints = BTreeMap::new();
        for (key, role) in [
            ("chat", EndpointRole::Chat),
            ("vision_chat", EndpointRole::VisionChat),
            ("text_embed", EndpointRole::TextEmbed),
            ("image_embed", EndpointRole::ImageEmbed),
            ("judge", EndpointRole::Judge),
        ] {
            if let Some(url) = self.endpoints.get(key) {
                endpoints.insert(role, url.clone());
            }
        }
        EndpointConfig {
            endpoints,
            api_key: self.api_key.clone(),
        }
    }

    /// Resolved view with secrets redacted, printed when verbose and written
    /// into `run.json`.
    pub fn redacted_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if self.api_key.is_some() {
            value["api_key"] = serde_json::Value::String("<redacted>".into());
        }
        serde_json::to_string_pretty(&value).expect("config serializes")
    }
}
