//! Structured-output parsing for model responses.
//!
//! Model bodies may wrap their JSON in markdown code fences or surround it
//! with prose; [`extract_json_slice`] strips both. Each schema validates the
//! required fields and enums, naming the offending field on violation.

use serde::Deserialize;
use serde_json::Value;

use crate::mmkg::GraphFragmentBody;
use crate::refinement::{Recommendation, RefinementAction};

use super::GatewayError;

/// Registered response schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaId {
    SceneGraph,
    KeepLists,
    RefinementAction,
    QaPairs,
    EntityList,
    JudgeScore,
    GraphFragment,
    SasScore,
}

/// A validated, typed response body.
#[derive(Debug, Clone)]
pub enum ParsedValue {
    /// Structurally valid scene-graph JSON; bbox bounds are validated by the
    /// scene module, which knows the image dimensions.
    SceneGraph(Value),
    KeepLists(KeepLists),
    RefinementAction(RefinementAction),
    QaPairs(QaPairsBody),
    EntityList(Vec<String>),
    JudgeScore(f64),
    GraphFragment(GraphFragmentBody),
    SasScore(f64),
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct KeepLists {
    #[serde(default)]
    pub keep_entities: Vec<String>,
    #[serde(default)]
    pub keep_relations: Vec<KeepRelation>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct KeepRelation {
    pub s: String,
    pub p: String,
    pub o: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QaPair {
    #[serde(rename = "Question")]
    pub question: String,
    #[serde(rename = "Answer")]
    pub answer: String,
}

/// Parsed QA pairs with the count of pairs dropped for empty fields.
#[derive(Debug, Clone)]
pub struct QaPairsBody {
    pub pairs: Vec<QaPair>,
    pub dropped: usize,
}

/// Strips markdown code fences and leading/trailing prose, returning the
/// JSON object slice of the body.
pub fn extract_json_slice(body: &str) -> &str {
    let trimmed = body.trim();
    // fenced block first: ```json ... ``` or ``` ... ```
    if let Some(fence_start) = trimmed.find("```") {
        let after = &trimmed[fence_start + 3..];
        let content_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let content = &after[content_start..];
        if let Some(fence_end) = content.find("```") {
            let inner = content[..fence_end].trim();
            if !inner.is_empty() {
                return inner;
            }
        }
    }
    // otherwise the outermost braces
    match (trimmed.find('{'), trimmed.rfind('}')) {
        (Some(start), Some(end)) if start < end => trimmed[start..=end].trim(),
        _ => trimmed,
    }
}

fn to_value(body: &str) -> Result<Value, GatewayError> {
    serde_json::from_str(extract_json_slice(body)).map_err(|e| GatewayError::MalformedJson {
        message: e.to_string(),
    })
}

fn violation(field: &str, message: impl Into<String>) -> GatewayError {
    GatewayError::SchemaViolation {
        field: field.to_string(),
        message: message.into(),
    }
}

fn from_value<T: for<'de> Deserialize<'de>>(
    value: Value,
    field: &str,
) -> Result<T, GatewayError> {
    serde_json::from_value(value).map_err(|e| violation(field, e.to_string()))
}

/// Parses and validates a model body against a registered schema.
pub fn parse_structured(body: &str, schema: SchemaId) -> Result<ParsedValue, GatewayError> {
    let value = to_value(body)?;
    match schema {
        SchemaId::SceneGraph => {
            let object = value
                .as_object()
                .ok_or_else(|| violation("entities", "body is not a JSON object"))?;
            for key in ["entities", "relations"] {
                match object.get(key) {
                    Some(Value::Array(_)) | None => {}
                    Some(_) => return Err(violation(key, "must be an array")),
                }
            }
            Ok(ParsedValue::SceneGraph(value))
        }
        SchemaId::KeepLists => {
            let lists: KeepLists = from_value(value, "keep_entities")?;
            Ok(ParsedValue::KeepLists(lists))
        }
        SchemaId::RefinementAction => parse_refinement_action(&value),
        SchemaId::QaPairs => {
            #[derive(Deserialize)]
            struct Raw {
                qa_pairs: Vec<Value>,
            }
            let raw: Raw = from_value(value, "qa_pairs")?;
            let mut pairs = Vec::new();
            let mut dropped = 0;
            for item in raw.qa_pairs {
                match serde_json::from_value::<QaPair>(item) {
                    Ok(pair) if !pair.question.trim().is_empty() && !pair.answer.trim().is_empty() => {
                        pairs.push(pair)
                    }
                    _ => dropped += 1,
                }
            }
            Ok(ParsedValue::QaPairs(QaPairsBody { pairs, dropped }))
        }
        SchemaId::EntityList => {
            #[derive(Deserialize)]
            struct Raw {
                entities: Vec<String>,
            }
            let raw: Raw = from_value(value, "entities")?;
            Ok(ParsedValue::EntityList(raw.entities))
        }
        SchemaId::JudgeScore => {
            let score = score_field(&value)?;
            if !(0.0..=100.0).contains(&score) {
                return Err(violation("score", format!("{score} outside [0,100]")));
            }
            Ok(ParsedValue::JudgeScore(score))
        }
        SchemaId::SasScore => {
            let score = score_field(&value)?;
            Ok(ParsedValue::SasScore(score.clamp(0.0, 1.0)))
        }
        SchemaId::GraphFragment => {
            let fragment: GraphFragmentBody = from_value(value, "entities")?;
            Ok(ParsedValue::GraphFragment(fragment))
        }
    }
}

fn score_field(value: &Value) -> Result<f64, GatewayError> {
    value
        .get("score")
        .and_then(Value::as_f64)
        .filter(|s| s.is_finite())
        .ok_or_else(|| violation("score", "missing or non-numeric"))
}

fn parse_refinement_action(value: &Value) -> Result<ParsedValue, GatewayError> {
    let recommendation = value
        .get("recommendation")
        .and_then(Value::as_str)
        .ok_or_else(|| violation("recommendation", "missing or non-string"))?;
    let recommendation = match recommendation {
        "Expand" => Recommendation::Expand,
        "Prune" => Recommendation::Prune,
        "Terminate" => Recommendation::Terminate,
        other => {
            return Err(violation(
                "recommendation",
                format!("{other:?} is not one of Expand|Prune|Terminate"),
            ))
        }
    };
    let string_list = |field: &str| -> Result<Vec<String>, GatewayError> {
        match value.get(field) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(v) => from_value(v.clone(), field),
        }
    };
    let confidence = match value.get("confidence") {
        None | Some(Value::Null) => 1.0,
        Some(v) => v
            .as_f64()
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| violation("confidence", "must be a number in [0,1]"))?,
    };
    let text_field = |field: &str| {
        value
            .get(field)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string()
    };
    Ok(ParsedValue::RefinementAction(RefinementAction {
        recommendation,
        nodes_to_expand: string_list("nodes_to_expand")?,
        nodes_to_prune: string_list("nodes_to_prune")?,
        analysis: text_field("analysis"),
        reason: text_field("reason"),
        confidence,
    }))
}
