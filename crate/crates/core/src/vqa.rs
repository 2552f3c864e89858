//! Multiple-choice VQAs bound to the ground-truth relation, from built-in
//! templates or from an LLM.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::geometry::{CameraObjectRelation, ClassTriple, RelationAxis, RelationClass};
use crate::llm::{ChatClient, ChatMessage, ChatRequest, LlmError};
use crate::matching::mentioned;
use crate::prompt::{category_text, ImageDescription};

pub const VQA_GENERATION_SYSTEM_PROMPT: &str = include_str!("prompts/vqa_generation.txt");

const SEPARATOR: &str = "===";

#[derive(Debug, Error, PartialEq)]
pub enum VqaError {
    #[error("no question templates for the {0} task")]
    NoTemplates(RelationAxis),
    #[error("template {template:?} lacks the {{category}} placeholder")]
    BadTemplate { template: String },
    #[error("QA block segment {segment}: {reason}")]
    Parse { segment: usize, reason: String },
    #[error("class index {index} out of range for {axis}")]
    ClassIndex { axis: RelationAxis, index: usize },
    #[error("llm request failed: {0}")]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub task: RelationAxis,
    /// Question text without the option list.
    pub question: String,
    /// Empty for open-ended items.
    pub options: Vec<String>,
    /// Index of the correct option; `None` for open-ended items.
    pub answer_index: Option<usize>,
    /// Correct option text, or the free-form answer.
    pub answer: String,
    pub image_ref: String,
}

impl VqaItem {
    pub fn is_multiple_choice(&self) -> bool {
        self.answer_index.is_some() && !self.options.is_empty()
    }

    /// Question followed by ` Options: (1) A (2) B ...`.
    pub fn render_prompt(&self) -> String {
        if self.options.is_empty() {
            return self.question.clone();
        }
        let listed: Vec<String> = self
            .options
            .iter()
            .enumerate()
            .map(|(i, o)| format!("({}) {}", i + 1, o))
            .collect();
        format!("{} Options: {}", self.question, listed.join(" "))
    }

    /// Checks the structural invariants of a multiple-choice item.
    pub fn validate(&self) -> Result<(), String> {
        let Some(answer) = self.answer_index else {
            return if self.options.is_empty() {
                Ok(())
            } else {
                Err("open-ended item must not list options".into())
            };
        };
        if answer >= self.options.len() {
            return Err(format!("answer index {answer} >= {} options", self.options.len()));
        }
        if self.options[answer] != self.answer {
            return Err("answer text differs from the indexed option".into());
        }
        let mut sorted = self.options.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.options.len() {
            return Err("duplicate options".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTemplateSet {
    pub orientation: Vec<String>,
    pub viewpoint: Vec<String>,
    pub shot: Vec<String>,
}

impl Default for QaTemplateSet {
    fn default() -> Self {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            orientation: owned(&[
                "Which direction is the {category} facing in the image?",
                "From the camera's perspective, which way is the {category} oriented?",
                "What is the orientation of the {category} relative to the camera?",
                "In which direction does the {category} in the picture face?",
            ]),
            viewpoint: owned(&[
                "What is the elevation viewpoint of the image of the {category}?",
                "From which camera viewpoint is the {category} photographed?",
                "Which viewpoint best describes how the camera sees the {category}?",
                "Is the photo of the {category} taken from the top, from the bottom, or horizontally?",
            ]),
            shot: owned(&[
                "Which camera shot is the image of the {category}?",
                "What type of camera shot is used to capture the {category}?",
                "How is the {category} framed by the camera?",
                "Is the {category} photographed in a close-up, a medium shot, or a long shot?",
            ]),
        }
    }
}

impl QaTemplateSet {
    pub fn for_task(&self, task: RelationAxis) -> &[String] {
        match task {
            RelationAxis::Orientation => &self.orientation,
            RelationAxis::Viewpoint => &self.viewpoint,
            RelationAxis::Shot => &self.shot,
        }
    }

    pub fn validate(&self) -> Result<(), VqaError> {
        for task in RelationAxis::ALL {
            let templates = self.for_task(task);
            if templates.is_empty() {
                return Err(VqaError::NoTemplates(task));
            }
            if let Some(t) = templates.iter().find(|t| !t.contains("{category}")) {
                return Err(VqaError::BadTemplate { template: t.clone() });
            }
        }
        Ok(())
    }
}

/// Seeded random source for option shuffles and template choice.
pub fn qa_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// One item for `task` whose answer is class `truth` (canonical index).
pub fn make_axis_vqa<R: Rng + ?Sized>(
    task: RelationAxis,
    truth: usize,
    category: &str,
    rng: &mut R,
    templates: &QaTemplateSet,
    image_ref: &str,
) -> Result<VqaItem, VqaError> {
    let names = task.class_names();
    if truth >= names.len() {
        return Err(VqaError::ClassIndex {
            axis: task,
            index: truth,
        });
    }
    let pool = templates.for_task(task);
    if pool.is_empty() {
        return Err(VqaError::NoTemplates(task));
    }
    let template = &pool[rng.random_range(0..pool.len())];
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(rng);
    let answer_index = order
        .iter()
        .position(|&i| i == truth)
        .expect("truth is in the permutation");
    Ok(VqaItem {
        task,
        question: template.replace("{category}", &category_text(category)),
        options: order.iter().map(|&i| names[i].to_string()).collect(),
        answer_index: Some(answer_index),
        answer: names[truth].to_string(),
        image_ref: image_ref.to_string(),
    })
}

fn truth_index(classes: &ClassTriple, task: RelationAxis) -> usize {
    match task {
        RelationAxis::Orientation => classes.orientation.index(),
        RelationAxis::Viewpoint => classes.viewpoint.index(),
        RelationAxis::Shot => classes.shot.index(),
    }
}

/// Orientation, viewpoint and shot items, in that order.
pub fn make_template_vqas<R: Rng + ?Sized>(
    beta: &CameraObjectRelation,
    category: &str,
    rng: &mut R,
    templates: &QaTemplateSet,
    image_ref: &str,
) -> Result<Vec<VqaItem>, VqaError> {
    templates.validate()?;
    let classes = beta.classes();
    RelationAxis::ALL
        .iter()
        .map(|&task| make_axis_vqa(task, truth_index(&classes, task), category, rng, templates, image_ref))
        .collect()
}

/// Split an LLM reply of `Question: ... === Answer: ... ===` blocks into
/// pairs. Trailing separators and surrounding whitespace are ignored.
pub fn parse_llm_qa_block(text: &str) -> Result<Vec<(String, String)>, VqaError> {
    let mut segments: Vec<&str> = text.split(SEPARATOR).map(str::trim).collect();
    while segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    let strip = |i: usize, marker: &str| -> Result<String, VqaError> {
        let body = segments[i].strip_prefix(marker).ok_or_else(|| VqaError::Parse {
            segment: i,
            reason: format!(
                "expected {marker:?}, found {:?}",
                segments[i].chars().take(40).collect::<String>()
            ),
        })?;
        Ok(body.trim().to_string())
    };
    let mut pairs = Vec::with_capacity(segments.len() / 2);
    for i in (0..segments.len()).step_by(2) {
        let question = strip(i, "Question:")?;
        if i + 1 >= segments.len() {
            return Err(VqaError::Parse {
                segment: i,
                reason: "question without an answer".into(),
            });
        }
        let answer = strip(i + 1, "Answer:")?;
        pairs.push((question, answer));
    }
    Ok(pairs)
}

/// Ground-truth values as they appear in the description block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericRelation {
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub dist: f64,
}

impl From<&CameraObjectRelation> for NumericRelation {
    fn from(beta: &CameraObjectRelation) -> Self {
        Self {
            phi_deg: beta.phi_deg(),
            theta_deg: beta.theta_deg(),
            dist: beta.dist_rel(),
        }
    }
}

/// Description block in the layout of the system prompt's example input.
pub fn relation_description(
    category: &str,
    beta: &CameraObjectRelation,
    numeric: &NumericRelation,
    description: Option<&ImageDescription>,
) -> String {
    let c = category_text(category);
    let classes = beta.classes();
    let orientation = classes.orientation.display_name();
    let mut first = format!("The image shows a {} view of {c}.", orientation.to_lowercase());
    if let Some(d) = description {
        first.push(' ');
        first.push_str(&d.object_sentence);
        first.push(' ');
        first.push_str(&d.scene_sentence);
    }
    format!(
        "{first}\n\
         The {c} is with an azimuth of {:.3} degree, facing {orientation} direction.\n\
         The elevation angle of the camera to the {c} is {:.2} degree, the camera viewpoint is {} view.\n\
         The relative distance from the camera to the {c} is {:.3} meters, the camera shot type is {}.",
        numeric.phi_deg,
        numeric.theta_deg,
        classes.viewpoint.display_name(),
        numeric.dist,
        classes.shot.display_name(),
    )
}

pub fn llm_vqa_request(
    category: &str,
    beta: &CameraObjectRelation,
    numeric: &NumericRelation,
    description: Option<&ImageDescription>,
    temperature: f64,
) -> ChatRequest {
    ChatRequest::new(
        vec![
            ChatMessage::system(VQA_GENERATION_SYSTEM_PROMPT),
            ChatMessage::user(relation_description(category, beta, numeric, description)),
        ],
        temperature,
    )
}

/// Phrases an answer may use for a class besides its display name.
const ORIENTATION_SYNONYMS: [(&str, usize); 4] = [
    ("towards the camera", 2),
    ("facing the camera", 2),
    ("toward the camera", 2),
    ("away from the camera", 6),
];

/// Classes an answer asserts on each axis, with synonyms resolved.
fn asserted_classes(answer: &str) -> Vec<(RelationAxis, usize)> {
    let mut out = Vec::new();
    for axis in RelationAxis::ALL {
        let mut phrases: Vec<&str> = axis.class_names().to_vec();
        let mut targets: Vec<usize> = (0..phrases.len()).collect();
        if axis == RelationAxis::Orientation {
            for (p, class) in ORIENTATION_SYNONYMS {
                phrases.push(p);
                targets.push(class);
            }
        }
        let mut hits: Vec<usize> = mentioned(answer, &phrases).into_iter().map(|i| targets[i]).collect();
        hits.sort_unstable();
        hits.dedup();
        out.extend(hits.into_iter().map(|c| (axis, c)));
    }
    out
}

/// Whether an answer names only ground-truth classes on every axis it
/// mentions. Answers naming no class pass.
pub fn answer_consistent(answer: &str, classes: &ClassTriple) -> bool {
    asserted_classes(answer)
        .into_iter()
        .all(|(axis, class)| truth_index(classes, axis) == class)
}

pub async fn request_llm_vqas<C: ChatClient + ?Sized>(
    llm: &C,
    category: &str,
    beta: &CameraObjectRelation,
    numeric: &NumericRelation,
    description: Option<&ImageDescription>,
    temperature: f64,
) -> Result<Vec<(String, String)>, VqaError> {
    let request = llm_vqa_request(category, beta, numeric, description, temperature);
    let reply = llm.complete(&request).await?;
    let classes = beta.classes();
    let pairs = parse_llm_qa_block(&reply)?;
    Ok(pairs
        .into_iter()
        .filter(|(q, a)| {
            let ok = answer_consistent(a, &classes);
            if !ok {
                warn!(question = %q, answer = %a, "dropping QA that contradicts the ground truth");
            }
            ok
        })
        .collect())
}

/// Split `"... Options: (a) X (b) Y"` into the stem and option texts.
pub fn split_inline_options(question: &str) -> (String, Vec<String>) {
    let Some(pos) = question.find("Options:") else {
        return (question.trim().to_string(), Vec::new());
    };
    let stem = question[..pos].trim().to_string();
    let rest = &question[pos + "Options:".len()..];
    let mut options = Vec::new();
    let mut current: Option<String> = None;
    let chars: Vec<char> = rest.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let is_label = chars[i] == '(' && i + 2 < chars.len() && chars[i + 1].is_alphanumeric() && chars[i + 2] == ')';
        if is_label {
            if let Some(o) = current.take() {
                options.push(o.trim().to_string());
            }
            current = Some(String::new());
            i += 3;
            continue;
        }
        if let Some(o) = current.as_mut() {
            o.push(chars[i]);
        }
        i += 1;
    }
    if let Some(o) = current {
        options.push(o.trim().to_string());
    }
    (stem, options)
}

fn option_label_index(answer: &str) -> Option<usize> {
    let mut chars = answer.trim_start().chars();
    if chars.next()? != '(' {
        return None;
    }
    let label = chars.next()?;
    if chars.next()? != ')' {
        return None;
    }
    match label {
        '1'..='9' => Some(label as usize - '1' as usize),
        'a'..='z' => Some(label as usize - 'a' as usize),
        'A'..='Z' => Some(label as usize - 'A' as usize),
        _ => None,
    }
}

/// Turn an LLM pair into a stored item. The task is the single axis the
/// answer speaks about; pairs that name no class (or several axes) yield
/// `None`. Items whose options are not all class names of that axis are
/// kept open-ended.
pub fn llm_pair_to_item(question: &str, answer: &str, image_ref: &str) -> Option<VqaItem> {
    let asserted = asserted_classes(answer);
    let axis = asserted.first()?.0;
    if asserted.iter().any(|(a, _)| *a != axis) {
        return None;
    }
    let (stem, options) = split_inline_options(question);
    let all_classes = !options.is_empty() && options.iter().all(|o| axis.class_index(o).is_some());
    if let (true, Some(idx)) = (all_classes, option_label_index(answer)) {
        if idx < options.len() {
            return Some(VqaItem {
                task: axis,
                question: stem,
                answer: options[idx].clone(),
                options,
                answer_index: Some(idx),
                image_ref: image_ref.to_string(),
            });
        }
    }
    Some(VqaItem {
        task: axis,
        question: question.trim().to_string(),
        options: Vec::new(),
        answer_index: None,
        answer: answer.trim().to_string(),
        image_ref: image_ref.to_string(),
    })
}
