//! Per-image scene graphs: generation, parsing, validation, and crops.
//!
//! The JSON schema is fixed by the scene-graph generation prompt: entities
//! carry a pixel bbox `[x1,y1,x2,y2]` with `0 <= x1 < x2 <= width` and
//! `0 <= y1 < y2 <= height`. Relations referencing unknown entities are
//! dropped with a warning count rather than failing the parse — model
//! outputs are noisy and the pipeline tolerates partial graphs.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::ImageReader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    extract_json_slice, templates, EndpointRole, GatewayError, MediaPart, ModelGateway,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed scene graph JSON: {message}")]
    MalformedJson { message: String },
    #[error("entity {id:?} bbox {bbox:?} violates {rule} for a {width}x{height} image")]
    BboxViolation {
        id: String,
        bbox: [i64; 4],
        rule: String,
        width: u32,
        height: u32,
    },
    #[error("entity {id:?} has unknown category {category:?}")]
    BadCategory { id: String, category: String },
    #[error("entity {id:?}: {reason}")]
    BadEntity { id: String, reason: String },
    #[error("duplicate scene entity id {id:?}")]
    DuplicateEntity { id: String },
    #[error("relation confidence {value} outside [0,1]")]
    BadConfidence { value: f64 },
    #[error("cannot read image {path:?}: {message}")]
    UnreadableImage { path: String, message: String },
    #[error("media ref {reference:?} is not resolvable: {message}")]
    MediaUnavailable { reference: String, message: String },
    #[error("bbox {bbox:?} outside image bounds {width}x{height}")]
    BboxOutOfBounds {
        bbox: [u32; 4],
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneCategory {
    Person,
    Object,
    Animal,
    Other,
}

impl SceneCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneCategory::Person => "person",
            SceneCategory::Object => "object",
            SceneCategory::Animal => "animal",
            SceneCategory::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub entity_id: String,
    pub name: String,
    pub category: SceneCategory,
    pub bbox_px: [u32; 4],
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRelation {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    #[serde(default)]
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub entities: Vec<SceneEntity>,
    pub relations: Vec<SceneRelation>,
}

impl SceneGraph {
    pub fn empty(width: u32, height: u32) -> Self {
        SceneGraph {
            image_ref: String::new(),
            width,
            height,
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn entity(&self, id: &str) -> Option<&SceneEntity> {
        self.entities.iter().find(|e| e.entity_id == id)
    }

    pub fn entity_ids(&self) -> BTreeSet<&str> {
        self.entities.iter().map(|e| e.entity_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut ids = BTreeSet::new();
        for entity in &self.entities {
            check_bbox(
                &entity.entity_id,
                entity.bbox_px.map(i64::from),
                self.width,
                self.height,
            )?;
            if !(0.0..=1.0).contains(&entity.confidence) {
                return Err(SceneError::BadConfidence {
                    value: entity.confidence,
                });
            }
            if !ids.insert(entity.entity_id.as_str()) {
                return Err(SceneError::DuplicateEntity {
                    id: entity.entity_id.clone(),
                });
            }
        }
        for relation in &self.relations {
            if !ids.contains(relation.subject_id.as_str()) || !ids.contains(relation.object_id.as_str())
            {
                return Err(SceneError::BadEntity {
                    id: relation.subject_id.clone(),
                    reason: "relation endpoint missing".into(),
                });
            }
            if !(0.0..=1.0).contains(&relation.confidence) {
                return Err(SceneError::BadConfidence {
                    value: relation.confidence,
                });
            }
        }
        Ok(())
    }
}

/// A parsed scene graph plus the count of relations dropped for missing
/// endpoints.
#[derive(Debug, Clone)]
pub struct SceneParse {
    pub graph: SceneGraph,
    pub dropped_relations: usize,
}

#[derive(Debug, Deserialize)]
struct RawScene {
    #[serde(default)]
    entities: Vec<RawEntity>,
    #[serde(default)]
    relations: Vec<RawRelation>,
}

#[derive(Debug, Deserialize)]
struct RawEntity {
    entity_id: String,
    name: String,
    category: String,
    bbox_px: [i64; 4],
    #[serde(default = "one")]
    confidence: f64,
}

#[derive(Debug, Deserialize)]
struct RawRelation {
    subject_id: String,
    predicate: String,
    object_id: String,
    #[serde(default = "one")]
    confidence: f64,
    #[serde(default)]
    evidence: Option<String>,
}

fn one() -> f64 {
    1.0
}

fn check_bbox(id: &str, bbox: [i64; 4], width: u32, height: u32) -> Result<(), SceneError> {
    let [x1, y1, x2, y2] = bbox;
    let rule = if x1 < 0 || y1 < 0 {
        Some("0 <= x1, 0 <= y1")
    } else if x1 >= x2 {
        Some("x1 < x2")
    } else if y1 >= y2 {
        Some("y1 < y2")
    } else if x2 > i64::from(width) {
        Some("x2 <= width")
    } else if y2 > i64::from(height) {
        Some("y2 <= height")
    } else {
        None
    };
    match rule {
        Some(rule) => Err(SceneError::BboxViolation {
            id: id.to_string(),
            bbox,
            rule: rule.to_string(),
            width,
            height,
        }),
        None => Ok(()),
    }
}

/// Parses and validates scene-graph JSON for an image of the given size.
/// Unknown JSON fields are ignored. Entities are canonically sorted by id,
/// relations by `(subject, predicate, object)`.
pub fn parse_scene_graph(
    json_text: &str,
    width: u32,
    height: u32,
) -> Result<SceneParse, SceneError> {
    let raw: RawScene =
        serde_json::from_str(extract_json_slice(json_text)).map_err(|e| SceneError::MalformedJson {
            message: e.to_string(),
        })?;

    let mut entities = Vec::with_capacity(raw.entities.len());
    let mut ids = BTreeSet::new();
    for entity in raw.entities {
        check_bbox(&entity.entity_id, entity.bbox_px, width, height)?;
        let category = match entity.category.as_str() {
            "person" => SceneCategory::Person,
            "object" => SceneCategory::Object,
            "animal" => SceneCategory::Animal,
            "other" => SceneCategory::Other,
            other => {
                return Err(SceneError::BadCategory {
                    id: entity.entity_id,
                    category: other.to_string(),
                })
            }
        };
        if !(0.0..=1.0).contains(&entity.confidence) {
            return Err(SceneError::BadConfidence {
                value: entity.confidence,
            });
        }
        if entity.entity_id.is_empty() {
            return Err(SceneError::BadEntity {
                id: entity.entity_id,
                reason: "empty entity_id".into(),
            });
        }
        if !ids.insert(entity.entity_id.clone()) {
            return Err(SceneError::DuplicateEntity {
                id: entity.entity_id,
            });
        }
        entities.push(SceneEntity {
            entity_id: entity.entity_id,
            name: entity.name,
            category,
            bbox_px: entity.bbox_px.map(|v| v as u32),
            confidence: entity.confidence,
        });
    }
    entities.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));

    let mut relations = Vec::new();
    let mut dropped = 0;
    for relation in raw.relations {
        if !ids.contains(&relation.subject_id) || !ids.contains(&relation.object_id) {
            dropped += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&relation.confidence) {
            return Err(SceneError::BadConfidence {
                value: relation.confidence,
            });
        }
        relations.push(SceneRelation {
            subject_id: relation.subject_id,
            predicate: relation.predicate,
            object_id: relation.object_id,
            confidence: relation.confidence,
            evidence: relation.evidence,
        });
    }
    relations.sort_by(|a, b| {
        (&a.subject_id, &a.predicate, &a.object_id).cmp(&(
            &b.subject_id,
            &b.predicate,
            &b.object_id,
        ))
    });

    Ok(SceneParse {
        graph: SceneGraph {
            image_ref: String::new(),
            width,
            height,
            entities,
            relations,
        },
        dropped_relations: dropped,
    })
}

/// Serializes a scene graph back to the prompt's JSON schema.
pub fn serialize_scene_graph(graph: &SceneGraph) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        entities: &'a [SceneEntity],
        relations: &'a [SceneRelation],
    }
    serde_json::to_string_pretty(&Out {
        entities: &graph.entities,
        relations: &graph.relations,
    })
    .expect("scene graph serializes")
}

/// Generates a scene graph for one image via the vision model, validating the
/// output and retrying with the validation error appended, up to the
/// gateway's retry budget.
pub fn generate_scene_graph(
    image_ref: &str,
    width: u32,
    height: u32,
    gateway: &ModelGateway,
) -> Result<SceneParse, SceneError> {
    let w = width.to_string();
    let h = height.to_string();
    let media = [MediaPart::uri(image_ref)];
    let mut parsed = gateway.call_with_retries(
        EndpointRole::VisionChat,
        templates::SCENE_GRAPH_GENERATION,
        &[("w", w.as_str()), ("h", h.as_str())],
        &media,
        |body| parse_scene_graph(body, width, height).map_err(|e| e.to_string()),
    )?;
    parsed.graph.image_ref = image_ref.to_string();
    Ok(parsed)
}

/// Resolves media references to local filesystem paths. Plain paths and
/// `file://` URIs resolve; anything else is unavailable in offline runs.
#[derive(Debug, Clone, Default)]
pub struct MediaResolver {
    root: Option<PathBuf>,
}

impl MediaResolver {
    pub fn new() -> Self {
        MediaResolver::default()
    }

    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        MediaResolver {
            root: Some(root.into()),
        }
    }

    pub fn resolve(&self, reference: &str) -> Result<PathBuf, SceneError> {
        let raw = reference.strip_prefix("file://").unwrap_or(reference);
        if raw.contains("://") {
            return Err(SceneError::MediaUnavailable {
                reference: reference.to_string(),
                message: "only local paths and file:// URIs resolve offline".into(),
            });
        }
        let path = Path::new(raw);
        let path = match (&self.root, path.is_absolute()) {
            (Some(root), false) => root.join(path),
            _ => path.to_path_buf(),
        };
        if !path.exists() {
            return Err(SceneError::MediaUnavailable {
                reference: reference.to_string(),
                message: "file not found".into(),
            });
        }
        Ok(path)
    }
}

/// Reads the pixel dimensions of a resolvable image (header only).
pub fn image_dimensions(
    resolver: &MediaResolver,
    image_ref: &str,
) -> Result<(u32, u32), SceneError> {
    let path = resolver.resolve(image_ref)?;
    image::image_dimensions(&path).map_err(|e| SceneError::UnreadableImage {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Crops a bbox region out of an image and returns it as PNG bytes, suitable
/// for the image-embedding endpoint.
pub fn crop_region(
    resolver: &MediaResolver,
    image_ref: &str,
    bbox: [u32; 4],
) -> Result<Vec<u8>, SceneError> {
    let path = resolver.resolve(image_ref)?;
    let image = ImageReader::open(&path)
        .map_err(|e| SceneError::UnreadableImage {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| SceneError::UnreadableImage {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let [x1, y1, x2, y2] = bbox;
    if x1 >= x2 || y1 >= y2 || x2 > image.width() || y2 > image.height() {
        return Err(SceneError::BboxOutOfBounds {
            bbox,
            width: image.width(),
            height: image.height(),
        });
    }
    let cropped = image.crop_imm(x1, y1, x2 - x1, y2 - y1);
    let mut bytes = Vec::new();
    cropped
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| SceneError::UnreadableImage {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    Ok(bytes)
}

/// Stable media name for a crop, used in embed digests and routing.
pub fn crop_name(image_ref: &str, bbox: [u32; 4]) -> String {
    format!(
        "{image_ref}#bbox=[{},{},{},{}]",
        bbox[0], bbox[1], bbox[2], bbox[3]
    )
}
