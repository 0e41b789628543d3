//! Prompt templates with `{{slot}}` placeholders.
//!
//! Templates are versioned text assets compiled into the binary; cassette
//! digests depend on the rendered text, so edits to an asset invalidate
//! recordings made against it. Literal braces (JSON schema examples) pass
//! through untouched; only `{{name}}` is a slot.

use std::collections::{BTreeMap, BTreeSet};

use super::GatewayError;

/// Built-in template ids.
pub mod templates {
    pub const SCENE_GRAPH_GENERATION: &str = "scene_graph_generation";
    pub const QUERY_PRUNING: &str = "query_pruning";
    pub const GRAPH_REFINEMENT: &str = "graph_refinement";
    pub const VQA_DATA_GENERATOR: &str = "vqa_data_generator";
    pub const ENTITY_EXTRACTION: &str = "entity_extraction";
    pub const GRAPH_EXTRACTION: &str = "graph_extraction";
    pub const ANSWER_GENERATION: &str = "answer_generation";
    pub const ANSWER_ZERO_SHOT: &str = "answer_zero_shot";
    pub const JUDGE_SCORE: &str = "judge_score";
    pub const SAS_SCORE: &str = "sas_score";
}

const BUILTINS: &[(&str, &str)] = &[
    (
        templates::SCENE_GRAPH_GENERATION,
        include_str!("../../assets/prompts/scene_graph_generation.txt"),
    ),
    (
        templates::QUERY_PRUNING,
        include_str!("../../assets/prompts/query_pruning.txt"),
    ),
    (
        templates::GRAPH_REFINEMENT,
        include_str!("../../assets/prompts/graph_refinement.txt"),
    ),
    (
        templates::VQA_DATA_GENERATOR,
        include_str!("../../assets/prompts/vqa_data_generator.txt"),
    ),
    (
        templates::ENTITY_EXTRACTION,
        include_str!("../../assets/prompts/entity_extraction.txt"),
    ),
    (
        templates::GRAPH_EXTRACTION,
        include_str!("../../assets/prompts/graph_extraction.txt"),
    ),
    (
        templates::ANSWER_GENERATION,
        include_str!("../../assets/prompts/answer_generation.txt"),
    ),
    (
        templates::ANSWER_ZERO_SHOT,
        include_str!("../../assets/prompts/answer_zero_shot.txt"),
    ),
    (
        templates::JUDGE_SCORE,
        include_str!("../../assets/prompts/judge_score.txt"),
    ),
    (
        templates::SAS_SCORE,
        include_str!("../../assets/prompts/sas_score.txt"),
    ),
];

#[derive(Debug, Clone)]
struct Template {
    text: String,
    slots: BTreeSet<String>,
}

fn scan_slots(text: &str) -> BTreeSet<String> {
    let mut slots = BTreeSet::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'{' && bytes[i + 1] == b'{' {
            if let Some(end) = text[i + 2..].find("}}") {
                let name = &text[i + 2..i + 2 + end];
                if !name.is_empty()
                    && name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    slots.insert(name.to_string());
                    i += 2 + end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    slots
}

/// Registry of prompt templates.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        let mut store = TemplateStore {
            templates: BTreeMap::new(),
        };
        for (id, text) in BUILTINS {
            store.register(id, text);
        }
        store
    }
}

impl TemplateStore {
    pub fn register(&mut self, id: &str, text: &str) {
        self.templates.insert(
            id.to_string(),
            Template {
                text: text.to_string(),
                slots: scan_slots(text),
            },
        );
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    /// Renders a template. Every slot must be bound; a binding without a slot
    /// is an error too, so typos in callers surface immediately.
    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<String, GatewayError> {
        let template = self
            .templates
            .get(id)
            .ok_or_else(|| GatewayError::UnknownTemplate { id: id.to_string() })?;
        for slot in &template.slots {
            if !bindings.contains_key(slot.as_str()) {
                return Err(GatewayError::MissingSlot {
                    template: id.to_string(),
                    slot: slot.clone(),
                });
            }
        }
        for key in bindings.keys() {
            if !template.slots.contains(*key) {
                return Err(GatewayError::UnknownBinding {
                    template: id.to_string(),
                    binding: key.to_string(),
                });
            }
        }
        let mut rendered = template.text.clone();
        for (key, value) in bindings {
            rendered = rendered.replace(&format!("{{{{{key}}}}}"), value);
        }
        Ok(rendered)
    }
}
