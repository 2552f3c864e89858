//! Image descriptions from an LLM and composition of the generation prompt.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::geometry::{CameraObjectRelation, RelationAxis};
use crate::llm::{ChatClient, ChatMessage, ChatRequest, LlmError};

pub const IMAGE_DESCRIPTION_SYSTEM_PROMPT: &str = include_str!("prompts/image_description.txt");

pub const QUALITY_CLAUSE: &str = "detailed, 4K, 35mm photograph, professional";

pub const DEFAULT_NEGATIVE_PROMPT: &str = "deformed, duplicate, lowres, bad anatomy, watermark, text";

const ABBREVIATIONS: [&str; 12] = [
    "mr", "mrs", "ms", "dr", "st", "vs", "etc", "e.g", "i.e", "approx", "no", "jr",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("category must not be empty")]
    EmptyCategory,
    #[error("llm request failed: {0}")]
    Llm(#[from] LlmError),
    #[error("could not split reply into two sentences after {attempts} attempts: {raw:?}")]
    Unparseable { attempts: u32, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription {
    pub object_sentence: String,
    pub scene_sentence: String,
    pub category: String,
}

impl ImageDescription {
    /// Sentences where the category noun appears more than once, a hint that
    /// the description may ask for several instances.
    pub fn repeated_category_warnings(&self) -> Vec<String> {
        let noun = category_text(&self.category).to_lowercase();
        if noun.is_empty() {
            return Vec::new();
        }
        [("object", &self.object_sentence), ("scene", &self.scene_sentence)]
            .into_iter()
            .filter(|(_, s)| s.to_lowercase().matches(&noun).count() > 1)
            .map(|(which, s)| format!("{which} sentence mentions {noun:?} more than once: {s}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub positive: String,
    pub negative: String,
    pub relation_clause: String,
}

/// Whether a fresh description is requested for every image or once per
/// category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionMode {
    #[default]
    PerImage,
    PerCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub negative: String,
    pub temperature: f64,
    /// Attempts at obtaining a well-formed reply.
    pub max_attempts: u32,
    pub mode: DescriptionMode,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            negative: DEFAULT_NEGATIVE_PROMPT.into(),
            temperature: 1.0,
            max_attempts: 3,
            mode: DescriptionMode::PerImage,
        }
    }
}

/// Synset labels such as `police_van` read as `police van`.
pub fn category_text(category: &str) -> String {
    category.trim().replace('_', " ")
}

pub fn description_user_message(category: &str) -> String {
    format!("Please generate the visual prompt of {}.", category_text(category))
}

pub fn description_request(category: &str, temperature: f64) -> ChatRequest {
    ChatRequest::new(
        vec![
            ChatMessage::system(IMAGE_DESCRIPTION_SYSTEM_PROMPT),
            ChatMessage::user(description_user_message(category)),
        ],
        temperature,
    )
}

fn is_abbreviation(text_before: &str) -> bool {
    let word = text_before
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str()) || (word.chars().count() == 1 && word.chars().all(char::is_alphabetic))
}

/// Split on sentence terminators followed by whitespace, keeping the
/// terminator. A period after a known abbreviation or a single letter does
/// not end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, (i, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let next_is_space = chars.get(k + 1).is_some_and(|(_, n)| n.is_whitespace());
        if !next_is_space {
            continue;
        }
        if *c == '.' && is_abbreviation(&text[start..*i]) {
            continue;
        }
        let end = i + c.len_utf8();
        let sentence = text[start..end].trim();
        if !sentence.is_empty() {
            out.push(sentence.to_string());
        }
        start = end;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Turn a raw reply into an object and a scene sentence; extra sentences are
/// appended to the scene sentence.
pub fn parse_description(reply: &str, category: &str) -> Option<ImageDescription> {
    let mut text = reply.trim();
    for label in ["Example Output:", "Output:"] {
        if let Some(rest) = text.strip_prefix(label) {
            text = rest.trim_start();
        }
    }
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let sentences = split_sentences(&joined);
    if sentences.len() < 2 {
        return None;
    }
    Some(ImageDescription {
        object_sentence: sentences[0].clone(),
        scene_sentence: sentences[1..].join(" "),
        category: category.to_string(),
    })
}

pub async fn request_description<C: ChatClient + ?Sized>(
    llm: &C,
    category: &str,
    config: &PromptConfig,
) -> Result<ImageDescription, PromptError> {
    if category.trim().is_empty() {
        return Err(PromptError::EmptyCategory);
    }
    let request = description_request(category, config.temperature);
    let attempts = config.max_attempts.max(1);
    let mut raw = String::new();
    for attempt in 1..=attempts {
        raw = llm.complete(&request).await?;
        match parse_description(&raw, category) {
            Some(desc) => {
                for w in desc.repeated_category_warnings() {
                    warn!("{w}");
                }
                return Ok(desc);
            }
            None => warn!(attempt, reply = %raw, "description reply is not two sentences"),
        }
    }
    Err(PromptError::Unparseable { attempts, raw })
}

/// `the image shows a front, horizontal, close-up view of a chicken`
pub fn relation_clause(beta: &CameraObjectRelation, category: &str) -> String {
    let classes = beta.classes();
    let names: Vec<String> = RelationAxis::ALL
        .iter()
        .map(|a| classes.name(*a).to_lowercase())
        .collect();
    format!(
        "the image shows a {} view of a {}",
        names.join(", "),
        category_text(category)
    )
}

fn without_quality_clause(sentence: &str) -> String {
    let cleaned = sentence.replace(QUALITY_CLAUSE, "");
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn compose_prompt(desc: &ImageDescription, beta: &CameraObjectRelation, config: &PromptConfig) -> PromptBundle {
    let clause = relation_clause(beta, &desc.category);
    let parts: Vec<String> = [&desc.object_sentence, &desc.scene_sentence]
        .into_iter()
        .map(|s| without_quality_clause(s))
        .filter(|s| !s.is_empty())
        .collect();
    let mut positive = format!("{clause}.");
    for p in parts {
        positive.push(' ');
        positive.push_str(&p);
    }
    positive.push(' ');
    positive.push_str(QUALITY_CLAUSE);
    PromptBundle {
        positive,
        negative: config.negative.clone(),
        relation_clause: clause,
    }
}
