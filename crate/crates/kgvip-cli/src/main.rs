//! `kgvip` — operator surface for the retrieval-and-fusion engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 gateway error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{PartialConfig, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Gateway(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Gateway(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Gateway(m) => m,
        }
    }
}

impl From<kgvip_core::mmkg::GraphError> for CliError {
    fn from(error: kgvip_core::mmkg::GraphError) -> Self {
        CliError::Data(error.to_string())
    }
}

impl From<kgvip_core::embedding::IndexError> for CliError {
    fn from(error: kgvip_core::embedding::IndexError) -> Self {
        match error {
            kgvip_core::embedding::IndexError::Gateway(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<kgvip_core::gateway::GatewayError> for CliError {
    fn from(error: kgvip_core::gateway::GatewayError) -> Self {
        CliError::Gateway(error.to_string())
    }
}

impl From<kgvip_core::scene::SceneError> for CliError {
    fn from(error: kgvip_core::scene::SceneError) -> Self {
        match error {
            kgvip_core::scene::SceneError::Gateway(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<kgvip_core::evalkit::EvalError> for CliError {
    fn from(error: kgvip_core::evalkit::EvalError) -> Self {
        match error {
            kgvip_core::evalkit::EvalError::Gateway(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<kgvip_core::retrieval::RetrievalError> for CliError {
    fn from(error: kgvip_core::retrieval::RetrievalError) -> Self {
        match error {
            kgvip_core::retrieval::RetrievalError::Gateway(inner) => inner.into(),
            kgvip_core::retrieval::RetrievalError::Index(inner) => inner.into(),
            kgvip_core::retrieval::RetrievalError::Scene(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "kgvip", version, about = "Multimodal knowledge-graph VQA engine")]
struct Cli {
    /// Config file (TOML or JSON by extension)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the resolved configuration (secrets redacted) before running
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the model-touching subcommands.
#[derive(Args, Debug, Default, Clone)]
struct GatewayArgs {
    /// Record every model response to this cassette
    #[arg(long)]
    record: Option<PathBuf>,

    /// Replay model responses from this cassette (no network)
    #[arg(long)]
    replay: Option<PathBuf>,

    /// Worker pool width
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
struct TuningArgs {
    /// Cross-modal weight α of the alignment score
    #[arg(long)]
    alpha: Option<f64>,

    /// Match acceptance threshold τ
    #[arg(long)]
    tau: Option<f64>,

    /// Refinement step bound t
    #[arg(long)]
    refine_steps: Option<usize>,

    /// Hop radius k of the text stage
    #[arg(long)]
    hop_radius: Option<usize>,

    /// Top-n keep count of the text stage
    #[arg(long)]
    text_keep: Option<usize>,

    /// Top-m keep count of the vision stage
    #[arg(long)]
    vision_keep: Option<usize>,

    /// Seed-link cosine threshold
    #[arg(long)]
    seed_link_threshold: Option<f64>,

    /// Vision retrieval mode: v2v or v2t
    #[arg(long)]
    vision_mode: Option<String>,

    /// Scene pruning mode: graph, query, or off
    #[arg(long)]
    pruning: Option<String>,

    /// Enable or disable graph fusion
    #[arg(long)]
    fusion: Option<bool>,

    /// Enable or disable graph refinement
    #[arg(long)]
    refinement: Option<bool>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print node/edge/image/component counts of a graph directory
    Stats {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Build a graph from a document corpus via LLM extraction
    Ingest {
        /// JSONL corpus of {id, text} documents
        #[arg(long)]
        docs: PathBuf,
        /// Output graph directory
        #[arg(long)]
        out_graph: PathBuf,
        /// Cosine threshold for entity merging
        #[arg(long, default_value_t = 0.9)]
        merge_threshold: f64,
        /// Minimum edge confidence kept
        #[arg(long, default_value_t = 0.0)]
        prune_threshold: f64,
        /// Skip the giant-component cut
        #[arg(long)]
        keep_all_components: bool,
        /// Embedding dimension for the merge index
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Attach image refs to entities from a manifest file
    Enrich {
        #[arg(long)]
        graph: PathBuf,
        /// JSONL of {id, image_refs} attachments
        #[arg(long)]
        manifest: PathBuf,
        /// Output graph directory (defaults to in-place)
        #[arg(long)]
        out_graph: Option<PathBuf>,
    },
    /// Build text/image vector files for a graph via the embedding endpoints
    Index {
        #[arg(long)]
        graph: PathBuf,
        /// Output JSONL for entity text vectors
        #[arg(long)]
        out_text: Option<PathBuf>,
        /// Output JSONL for entity image vectors
        #[arg(long)]
        out_image: Option<PathBuf>,
        /// Embedding dimension
        #[arg(long)]
        dim: Option<usize>,
        /// Root directory for resolving image refs
        #[arg(long)]
        media_root: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Generate and validate a scene graph for one image
    Scene {
        #[arg(long)]
        image: PathBuf,
        /// Write the scene graph JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Answer one question about one image
    Ask {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        text_index: PathBuf,
        #[arg(long)]
        image_index: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        /// Run directory for the answer record and artifacts
        #[arg(long)]
        out: Option<PathBuf>,
        /// Persist per-stage artifact snapshots
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[command(flatten)]
        tuning: TuningArgs,
    },
    /// Evaluate a QA dataset end to end
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        text_index: PathBuf,
        #[arg(long)]
        image_index: Option<PathBuf>,
        /// Run directory for report.json and aggregates.csv
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score with the LLM judge
        #[arg(long)]
        judge: bool,
        /// Score with the semantic-similarity endpoint
        #[arg(long)]
        sas: bool,
        /// Method label for the CSV row
        #[arg(long, default_value = "kg-vip")]
        method: String,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[command(flatten)]
        tuning: TuningArgs,
    },
    /// Generate QA samples from scene descriptions and reference facts
    Genqa {
        /// JSONL of {image, description, facts} scene records
        #[arg(long)]
        scenes: PathBuf,
        /// Output dataset JSONL
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
}

impl TuningArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            alpha: self.alpha,
            tau: self.tau,
            refine_steps: self.refine_steps,
            hop_radius: self.hop_radius,
            text_keep: self.text_keep,
            vision_keep: self.vision_keep,
            seed_link_threshold: self.seed_link_threshold,
            vision_mode: self.vision_mode.clone(),
            pruning: self.pruning.clone(),
            fusion: self.fusion,
            refinement: self.refinement,
            ..Default::default()
        }
    }
}

impl GatewayArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            record: self.record.clone(),
            replay: self.replay.clone(),
            jobs: self.jobs,
            ..Default::default()
        }
    }
}

fn resolve(cli: &Cli, flags: PartialConfig) -> Result<RunConfig, CliError> {
    let file = match &cli.config {
        Some(path) => PartialConfig::from_file(path)?,
        None => PartialConfig::default(),
    };
    let env = PartialConfig::from_env();
    let config = RunConfig::resolve(&flags, &file, &env)?;
    if cli.verbose {
        eprintln!("{}", config.redacted_json());
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Stats { graph } => {
            let flags = PartialConfig {
                graph: Some(graph.clone()),
                ..Default::default()
            };
            let config = resolve(&cli, flags)?;
            commands::stats(&config)
        }
        Command::Ingest {
            docs,
            out_graph,
            merge_threshold,
            prune_threshold,
            keep_all_components,
            dim,
            gateway,
        } => {
            let flags = PartialConfig {
                dim: *dim,
                ..gateway.partial()
            };
            let config = resolve(&cli, flags)?;
            commands::ingest(
                &config,
                docs,
                out_graph,
                *merge_threshold,
                *prune_threshold,
                !*keep_all_components,
            )
        }
        Command::Enrich {
            graph,
            manifest,
            out_graph,
        } => {
            let config = resolve(&cli, PartialConfig::default())?;
            commands::enrich(&config, graph, manifest, out_graph.as_deref().unwrap_or(graph))
        }
        Command::Index {
            graph,
            out_text,
            out_image,
            dim,
            media_root,
            gateway,
        } => {
            let flags = PartialConfig {
                dim: *dim,
                ..gateway.partial()
            };
            let config = resolve(&cli, flags)?;
            commands::index(
                &config,
                graph,
                out_text.as_deref(),
                out_image.as_deref(),
                media_root.as_deref(),
            )
        }
        Command::Scene {
            image,
            out,
            gateway,
        } => {
            let config = resolve(&cli, gateway.partial())?;
            commands::scene(&config, image, out.as_deref())
        }
        Command::Ask {
            graph,
            text_index,
            image_index,
            image,
            question,
            out,
            trace,
            gateway,
            tuning,
        } => {
            let flags = PartialConfig {
                graph: Some(graph.clone()),
                text_index: Some(text_index.clone()),
                image_index: image_index.clone(),
                out: out.clone(),
                trace: Some(*trace),
                ..tuning.partial().or(&gateway.partial())
            };
            let config = resolve(&cli, flags)?;
            commands::ask(&config, image, question)
        }
        Command::Eval {
            dataset,
            graph,
            text_index,
            image_index,
            out,
            judge,
            sas,
            method,
            gateway,
            tuning,
        } => {
            let flags = PartialConfig {
                graph: Some(graph.clone()),
                text_index: Some(text_index.clone()),
                image_index: image_index.clone(),
                out: out.clone(),
                judge: Some(*judge),
                sas: Some(*sas),
                ..tuning.partial().or(&gateway.partial())
            };
            let config = resolve(&cli, flags)?;
            commands::eval(&config, dataset, method)
        }
        Command::Genqa {
            scenes,
            out,
            gateway,
        } => {
            let config = resolve(&cli, gateway.partial())?;
            commands::genqa(&config, scenes, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error) => {
            // clap distinguishes --help/--version from real usage errors
            use clap::error::ErrorKind;
            let _ = error.print();
            return match error.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {}", error.message());
            ExitCode::from(error.code())
        }
    }
}
