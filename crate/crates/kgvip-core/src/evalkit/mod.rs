//! Evaluation harness: METEOR locally, LLM-as-judge and SAS through the
//! gateway, dataset iteration with per-sample failure isolation, report and
//! CSV generation, and the QA-generation pipeline.

mod meteor;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use meteor::{meteor, tokenize};

use crate::gateway::{
    templates, EndpointRole, GatewayError, MediaPart, ModelGateway, ParsedValue, QaPair, SchemaId,
};
use crate::mmkg::Graph;
use crate::pipeline::{answer_query, AnswerRecord, IndexBundle, PipelineConfig};
use crate::scene::MediaResolver;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error in {path} line {line}: {message}")]
    DatasetParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("sample {id:?}: {reason}")]
    BadSample { id: String, reason: String },
    #[error("QA generation needs a scene description or reference facts")]
    EmptyGenerationInputs,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One dataset entry: an image, a question needing external knowledge, and
/// the reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
}

impl QASample {
    fn check(&self) -> Result<(), String> {
        for (field, value) in [
            ("id", &self.id),
            ("image", &self.image),
            ("question", &self.question),
            ("answer", &self.answer),
        ] {
            if value.trim().is_empty() {
                return Err(format!("empty {field}"));
            }
        }
        Ok(())
    }
}

/// Loads and fully validates a dataset before any model call.
pub fn load_dataset(path: &Path) -> Result<Vec<QASample>, EvalError> {
    let file = std::fs::File::open(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut samples = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: QASample = serde_json::from_str(&line).map_err(|e| EvalError::DatasetParse {
            path: path.display().to_string(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        sample.check().map_err(|reason| EvalError::DatasetParse {
            path: path.display().to_string(),
            line: line_no + 1,
            message: reason,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Scores a 0–100 relevance judgment of the candidate against the reference.
pub fn llm_judge(
    question: &str,
    reference: &str,
    candidate: &str,
    gateway: &ModelGateway,
) -> Result<f64, EvalError> {
    let parsed = gateway.call_structured(
        EndpointRole::Judge,
        templates::JUDGE_SCORE,
        &[
            ("question", question),
            ("reference", reference),
            ("candidate", candidate),
        ],
        &[],
        SchemaId::JudgeScore,
    )?;
    match parsed {
        ParsedValue::JudgeScore(score) => Ok(score),
        _ => unreachable!("schema id fixes the variant"),
    }
}

/// Forwards the pair to the semantic-similarity scorer, clamped to [0,1].
pub fn sas(candidate: &str, reference: &str, gateway: &ModelGateway) -> Result<f64, EvalError> {
    let parsed = gateway.call_structured(
        EndpointRole::Judge,
        templates::SAS_SCORE,
        &[("reference", reference), ("candidate", candidate)],
        &[],
        SchemaId::SasScore,
    )?;
    match parsed {
        ParsedValue::SasScore(score) => Ok(score),
        _ => unreachable!("schema id fixes the variant"),
    }
}

/// Which gateway-backed metrics to compute. METEOR always runs locally.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricToggles {
    pub llm_judge: bool,
    pub sas: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub answer: String,
    pub meteor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_j: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub stage: String,
    pub message: String,
}

/// Aggregate means on the conventional reporting scale: METEOR and SAS are
/// means ×100, LLM-J is already on a 0–100 scale.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub scored: usize,
    pub meteor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_j: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub samples: Vec<SampleScore>,
    pub failures: Vec<SampleFailure>,
    pub aggregates: Aggregates,
    /// Answer records per sample, keyed by id (wall-clock stripped).
    #[serde(default)]
    pub records: BTreeMap<String, AnswerRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

/// Recomputes aggregates from per-sample scores (the report invariant).
pub fn aggregate(samples: &[SampleScore]) -> Aggregates {
    Aggregates {
        scored: samples.len(),
        meteor: mean(samples.iter().map(|s| s.meteor)).unwrap_or(0.0) * 100.0,
        llm_j: mean(samples.iter().filter_map(|s| s.llm_j)),
        sas: mean(samples.iter().filter_map(|s| s.sas)).map(|m| m * 100.0),
    }
}

/// Stable fingerprint of the pipeline configuration.
pub fn config_fingerprint(config: &PipelineConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Everything an evaluation run reads.
pub struct EvalEnvironment<'a> {
    pub commonsense: &'a Graph,
    pub indexes: &'a IndexBundle,
    pub config: &'a PipelineConfig,
    pub gateway: &'a ModelGateway,
    pub resolver: MediaResolver,
    pub metrics: MetricToggles,
    pub jobs: usize,
}

/// Evaluates every sample, isolating per-sample failures, and assembles the
/// report as a deterministic ordered reduction by sample id.
pub fn eval_run(samples: &[QASample], env: &EvalEnvironment<'_>) -> EvalReport {
    eval_run_with_cancel(samples, env, &AtomicBool::new(false))
}

/// `eval_run` with a cooperative cancellation flag: once set, no new sample
/// starts; in-flight samples finish and the partial report is returned.
pub fn eval_run_with_cancel(
    samples: &[QASample],
    env: &EvalEnvironment<'_>,
    cancel: &AtomicBool,
) -> EvalReport {
    let cursor = AtomicUsize::new(0);
    let scores: Mutex<Vec<SampleScore>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<SampleFailure>> = Mutex::new(Vec::new());
    let records: Mutex<BTreeMap<String, AnswerRecord>> = Mutex::new(BTreeMap::new());

    let worker = || loop {
        if cancel.load(Ordering::SeqCst) {
            break;
        }
        let index = cursor.fetch_add(1, Ordering::SeqCst);
        let Some(sample) = samples.get(index) else {
            break;
        };
        let (score, failure, record) = evaluate_sample(sample, env);
        if let Some(score) = score {
            scores.lock().expect("scores lock").push(score);
        }
        if let Some(failure) = failure {
            failures.lock().expect("failures lock").push(failure);
        }
        let mut canonical = record.clone();
        canonical.timings = Vec::new();
        canonical.total_millis = 0.0;
        records
            .lock()
            .expect("records lock")
            .insert(sample.id.clone(), canonical);
    };

    let jobs = env.jobs.max(1).min(samples.len().max(1));
    if jobs <= 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(worker);
            }
        });
    }

    let mut samples_out = scores.into_inner().expect("scores lock");
    samples_out.sort_by(|a, b| a.id.cmp(&b.id));
    let mut failures_out = failures.into_inner().expect("failures lock");
    failures_out.sort_by(|a, b| a.id.cmp(&b.id));
    let aggregates = aggregate(&samples_out);
    EvalReport {
        config_fingerprint: config_fingerprint(env.config),
        samples: samples_out,
        failures: failures_out,
        aggregates,
        records: records.into_inner().expect("records lock"),
    }
}

fn evaluate_sample(
    sample: &QASample,
    env: &EvalEnvironment<'_>,
) -> (Option<SampleScore>, Option<SampleFailure>, AnswerRecord) {
    let (record, _artifacts) = answer_query(
        &sample.id,
        &sample.question,
        &sample.image,
        env.commonsense,
        env.indexes,
        env.config,
        env.gateway,
        &env.resolver,
    );
    if let Some(failure) = &record.failure {
        return (
            None,
            Some(SampleFailure {
                id: sample.id.clone(),
                stage: failure.stage.clone(),
                message: failure.message.clone(),
            }),
            record,
        );
    }

    let meteor_score = meteor(&record.answer, &sample.answer);
    let llm_j = if env.metrics.llm_judge {
        match llm_judge(&sample.question, &sample.answer, &record.answer, env.gateway) {
            Ok(score) => Some(score),
            Err(error) => {
                return (
                    None,
                    Some(SampleFailure {
                        id: sample.id.clone(),
                        stage: "llm_judge".into(),
                        message: error.to_string(),
                    }),
                    record,
                )
            }
        }
    } else {
        None
    };
    let sas_score = if env.metrics.sas {
        match sas(&record.answer, &sample.answer, env.gateway) {
            Ok(score) => Some(score),
            Err(error) => {
                return (
                    None,
                    Some(SampleFailure {
                        id: sample.id.clone(),
                        stage: "sas".into(),
                        message: error.to_string(),
                    }),
                    record,
                )
            }
        }
    } else {
        None
    };

    (
        Some(SampleScore {
            id: sample.id.clone(),
            answer: record.answer.clone(),
            meteor: meteor_score,
            llm_j,
            sas: sas_score,
        }),
        None,
        record,
    )
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// One-row aggregate CSV with a method column and the configured metric
/// columns, shaped like a results table.
pub fn aggregate_csv(method: &str, report: &EvalReport) -> String {
    let mut header = vec!["method".to_string()];
    let mut row = vec![csv_escape(method)];
    if let Some(llm_j) = report.aggregates.llm_j {
        header.push("llm_j".into());
        row.push(format!("{llm_j:.2}"));
    }
    header.push("meteor".into());
    row.push(format!("{:.2}", report.aggregates.meteor));
    if let Some(sas) = report.aggregates.sas {
        header.push("sas".into());
        row.push(format!("{sas:.2}"));
    }
    format!("{}\n{}\n", header.join(","), row.join(","))
}

/// Generates QA samples for one scene via the data-generator prompt. Pairs
/// with empty questions or answers are dropped with a warning count.
pub fn generate_qa(
    image_ref: &str,
    scene_description: &str,
    reference_facts: &str,
    gateway: &ModelGateway,
) -> Result<(Vec<QASample>, usize), EvalError> {
    if scene_description.trim().is_empty() && reference_facts.trim().is_empty() {
        return Err(EvalError::EmptyGenerationInputs);
    }
    let media = [MediaPart::uri(image_ref)];
    let parsed = gateway.call_structured(
        EndpointRole::VisionChat,
        templates::VQA_DATA_GENERATOR,
        &[
            ("scene_image", image_ref),
            ("scene_description", scene_description),
            ("reference_facts", reference_facts),
        ],
        &media,
        SchemaId::QaPairs,
    )?;
    let ParsedValue::QaPairs(body) = parsed else {
        unreachable!("schema id fixes the variant");
    };
    let samples = body
        .pairs
        .into_iter()
        .enumerate()
        .map(|(i, QaPair { question, answer })| QASample {
            id: format!("{image_ref}#qa{i}"),
            image: image_ref.to_string(),
            question,
            answer,
        })
        .collect();
    Ok((samples, body.dropped))
}
