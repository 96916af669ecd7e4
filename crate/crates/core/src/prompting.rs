//! Hybrid prompt assembly, label registry and SFT answer targets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};

pub const LABEL_PLACEHOLDER: &str = "{label}";
pub const DATASET_PLACEHOLDER: &str = "{dataset}";
pub const DEFAULT_ANSWER_TEMPLATE: &str = "Answer: {label}.";
pub const SEGMENT_SEPARATOR: &str = "\n";

/// Where the aligned embeddings sit relative to the prompt text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SlotOrder {
    #[default]
    SlotFirst,
    SlotLast,
}

impl SlotOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotOrder::SlotFirst => "slot-first",
            SlotOrder::SlotLast => "slot-last",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub domain_description: String,
    pub prior_knowledge: String,
    pub task_description: String,
    #[serde(default)]
    pub order: SlotOrder,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        for (name, seg) in [
            ("domain_description", &self.domain_description),
            ("prior_knowledge", &self.prior_knowledge),
            ("task_description", &self.task_description),
        ] {
            if seg.trim().is_empty() {
                return Err(Error::config(format!("prompt segment {name} is empty")));
            }
        }
        Ok(())
    }

    pub fn with_order(mut self, order: SlotOrder) -> Self {
        self.order = order;
        self
    }
}

/// `label_overrides` values: either a replacement canonical text or a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelOverride {
    Canonical(String),
    Full {
        #[serde(default)]
        canonical: Option<String>,
        #[serde(default)]
        aliases: Vec<String>,
    },
}

/// On-disk prompt configuration for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub domain_description: String,
    pub prior_knowledge: String,
    pub task_description: String,
    #[serde(default)]
    pub order: SlotOrder,
    #[serde(default = "default_answer_template")]
    pub answer_template: String,
    /// Keyed by the dataset's original label text.
    #[serde(default)]
    pub label_overrides: BTreeMap<String, LabelOverride>,
}

fn default_answer_template() -> String {
    DEFAULT_ANSWER_TEMPLATE.to_string()
}

impl PromptConfig {
    pub fn template(&self) -> PromptTemplate {
        PromptTemplate {
            domain_description: self.domain_description.clone(),
            prior_knowledge: self.prior_knowledge.clone(),
            task_description: self.task_description.clone(),
            order: self.order,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.template().validate()?;
        Ok(cfg)
    }

    /// Shipped defaults, looked up by dataset name (case-insensitive).
    pub fn builtin(dataset_name: &str) -> Self {
        let key = dataset_name.to_ascii_lowercase();
        let text = BUILTIN_PROMPTS
            .iter()
            .find(|(name, _)| name.to_ascii_lowercase() == key)
            .map_or(GENERIC_PROMPT, |(_, t)| t);
        serde_json::from_str(text).expect("shipped prompt config is valid JSON")
    }

    /// Dataset names that have a shipped prompt file.
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_PROMPTS.iter().map(|(n, _)| *n)
    }
}

const GENERIC_PROMPT: &str = include_str!("../prompts/generic.json");

const BUILTIN_PROMPTS: &[(&str, &str)] = &[
    ("Synthetic", include_str!("../prompts/synthetic.json")),
    ("CharacterTrajectories", include_str!("../prompts/character_trajectories.json")),
    ("Epilepsy", include_str!("../prompts/epilepsy.json")),
    ("FaceDetection", include_str!("../prompts/face_detection.json")),
    ("Heartbeat", include_str!("../prompts/heartbeat.json")),
    ("NATOPS", include_str!("../prompts/natops.json")),
    ("PenDigits", include_str!("../prompts/pen_digits.json")),
    ("PEMS-SF", include_str!("../prompts/pems_sf.json")),
    ("SpokenArabicDigits", include_str!("../prompts/spoken_arabic_digits.json")),
    ("SelfRegulationSCP1", include_str!("../prompts/self_regulation_scp1.json")),
    ("SelfRegulationSCP2", include_str!("../prompts/self_regulation_scp2.json")),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub label_id: usize,
    pub canonical_text: String,
    pub aliases: Vec<String>,
}

/// Prompt text around the embedding slot, plus the answer for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub rendered_text_before_slot: String,
    pub rendered_text_after_slot: String,
    pub target_text: Option<String>,
    pub label_id: Option<usize>,
}

impl PromptBundle {
    /// Full model input text with `marker` standing in for the embedding slot.
    pub fn with_slot(&self, marker: &str) -> String {
        format!("{}{marker}{}", self.rendered_text_before_slot, self.rendered_text_after_slot)
    }

    pub fn prompt_text(&self) -> String {
        format!("{}{}", self.rendered_text_before_slot, self.rendered_text_after_slot)
    }

    pub fn with_target(mut self, label: &LabelSpec, answer_template: &str) -> Result<Self> {
        self.target_text = Some(build_training_target(label, answer_template)?);
        self.label_id = Some(label.label_id);
        Ok(self)
    }
}

pub fn register_label_texts(
    bundle: &DatasetBundle,
    overrides: Option<&BTreeMap<String, LabelOverride>>,
) -> Result<Vec<LabelSpec>> {
    if let Some(ov) = overrides {
        for key in ov.keys() {
            if !bundle.label_texts.contains(key) {
                return Err(Error::config(format!("label override for unknown label {key:?}")));
            }
        }
    }
    let specs: Vec<LabelSpec> = bundle
        .label_texts
        .iter()
        .enumerate()
        .map(|(label_id, text)| {
            let (canonical_text, aliases) = match overrides.and_then(|o| o.get(text)) {
                None => (text.clone(), Vec::new()),
                Some(LabelOverride::Canonical(c)) => (c.clone(), Vec::new()),
                Some(LabelOverride::Full { canonical, aliases }) => {
                    (canonical.clone().unwrap_or_else(|| text.clone()), aliases.clone())
                }
            };
            LabelSpec {
                label_id,
                canonical_text,
                aliases,
            }
        })
        .collect();
    validate_registry(&specs)?;
    Ok(specs)
}

pub fn validate_registry(specs: &[LabelSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("label registry is empty"));
    }
    let mut owner: BTreeMap<String, usize> = BTreeMap::new();
    for s in specs {
        let c = s.canonical_text.trim().to_lowercase();
        if c.is_empty() {
            return Err(Error::config(format!("label {} has an empty canonical text", s.label_id)));
        }
        if let Some(prev) = owner.insert(c.clone(), s.label_id) {
            return Err(Error::config(format!(
                "labels {prev} and {} share canonical text {c:?}",
                s.label_id
            )));
        }
    }
    for s in specs {
        for a in &s.aliases {
            let a = a.trim().to_lowercase();
            if a.is_empty() {
                return Err(Error::config(format!("label {} has an empty alias", s.label_id)));
            }
            match owner.get(&a) {
                Some(&o) if o != s.label_id => {
                    return Err(Error::config(format!(
                        "alias {a:?} of label {} collides with label {o}",
                        s.label_id
                    )))
                }
                Some(_) => {}
                None => {
                    owner.insert(a, s.label_id);
                }
            }
        }
    }
    Ok(())
}

/// Assembles the three text segments in fixed order, separated by newlines,
/// placing them after the embedding slot (slot-first) or before it (slot-last).
pub fn render_prompt(template: &PromptTemplate, dataset_name: &str) -> Result<PromptBundle> {
    template.validate()?;
    let text = [
        &template.domain_description,
        &template.prior_knowledge,
        &template.task_description,
    ]
    .iter()
    .map(|s| s.trim().replace(DATASET_PLACEHOLDER, dataset_name))
    .collect::<Vec<_>>()
    .join(SEGMENT_SEPARATOR);
    let (before, after) = match template.order {
        SlotOrder::SlotFirst => (String::new(), text),
        SlotOrder::SlotLast => (text, String::new()),
    };
    Ok(PromptBundle {
        rendered_text_before_slot: before,
        rendered_text_after_slot: after,
        target_text: None,
        label_id: None,
    })
}

/// Prompt used by the prompt-off ablation: a single neutral instruction.
pub fn bare_prompt(order: SlotOrder) -> PromptBundle {
    let text = "Classify.".to_string();
    let (before, after) = match order {
        SlotOrder::SlotFirst => (String::new(), text),
        SlotOrder::SlotLast => (text, String::new()),
    };
    PromptBundle {
        rendered_text_before_slot: before,
        rendered_text_after_slot: after,
        target_text: None,
        label_id: None,
    }
}

pub fn build_training_target(label: &LabelSpec, answer_template: &str) -> Result<String> {
    match answer_template.matches(LABEL_PLACEHOLDER).count() {
        1 => Ok(answer_template.replace(LABEL_PLACEHOLDER, &label.canonical_text)),
        0 => Err(Error::config(format!(
            "answer template {answer_template:?} has no {LABEL_PLACEHOLDER} placeholder"
        ))),
        _ => Err(Error::config(format!(
            "answer template {answer_template:?} has more than one {LABEL_PLACEHOLDER} placeholder"
        ))),
    }
}
