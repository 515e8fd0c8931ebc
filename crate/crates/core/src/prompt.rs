//! Prompt assembly for the four prompting strategies.
//!
//! System text is rendered from versioned templates under `resources/prompts`,
//! with the taxonomy knowledge block and worked examples substituted in. The
//! screens and the action description travel as separate content parts, in the
//! order: screens (first to last), then the action description.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{ImpactLevel, LabelSet, Labels, Taxonomy, TaxonomyError};
use crate::trace::{serialize_screen_html, Trace};

const ZERO_SHOT_TEMPLATE: &str = include_str!("../resources/prompts/zero_shot.tmpl");
const KAP_TEMPLATE: &str = include_str!("../resources/prompts/kap.tmpl");
const ICL_TEMPLATE: &str = include_str!("../resources/prompts/icl.tmpl");
const COT_TEMPLATE: &str = include_str!("../resources/prompts/cot.tmpl");
const RESPONSE_CONTRACT: &str = include_str!("../resources/prompts/response_contract.txt");
const DEFAULT_EXEMPLARS: &str = include_str!("../resources/exemplars.json");

/// Field name used for the overall impact level in expected fields.
pub const IMPACT_LEVEL_FIELD: &str = "impact_level";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("strategy `{0}` needs a non-empty exemplar bank")]
    MissingBank(Strategy),
    #[error("trace `{0}` has no screens")]
    EmptyTrace(String),
    #[error("exemplar bank could not be parsed: {0}")]
    BankParse(String),
    #[error("exemplar {index} is invalid: {source}")]
    InvalidExemplar {
        index: usize,
        #[source]
        source: TaxonomyError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    Kap,
    Icl,
    Cot,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::ZeroShot, Strategy::Kap, Strategy::Icl, Strategy::Cot];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::Kap => "kap",
            Strategy::Icl => "icl",
            Strategy::Cot => "cot",
        }
    }

    /// Whether the strategy asks for per-category judgments.
    pub fn requests_categories(self) -> bool {
        self != Strategy::ZeroShot
    }

    pub fn needs_bank(self) -> bool {
        matches!(self, Strategy::Icl | Strategy::Cot)
    }

    pub fn template(self) -> &'static str {
        match self {
            Strategy::ZeroShot => ZERO_SHOT_TEMPLATE,
            Strategy::Kap => KAP_TEMPLATE,
            Strategy::Icl => ICL_TEMPLATE,
            Strategy::Cot => COT_TEMPLATE,
        }
    }

    /// SHA-256 of the template text, recorded in run metadata.
    pub fn template_hash(self) -> String {
        sha256_hex(self.template().as_bytes())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zeroshot" => Ok(Strategy::ZeroShot),
            "kap" => Ok(Strategy::Kap),
            "icl" => Ok(Strategy::Icl),
            "cot" => Ok(Strategy::Cot),
            other => Err(format!("unknown strategy `{other}` (expected zero_shot, kap, icl or cot)")),
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// How screens are handed to a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenModality {
    #[default]
    Html,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    ScreenHtml { index: usize, html: String },
    /// Image reference; `html` is the fallback for text-only backends.
    ScreenImage { index: usize, image_ref: String, html: String },
    Action { text: String },
}

impl ContentPart {
    pub fn is_image(&self) -> bool {
        matches!(self, ContentPart::ScreenImage { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub trace_id: String,
    pub strategy: Strategy,
    pub system_text: String,
    pub content_parts: Vec<ContentPart>,
    pub expected_fields: Vec<String>,
    /// Screens dropped to fit a screen budget; 0 unless a budget was set.
    #[serde(default)]
    pub elided_screens: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PromptOptions {
    pub modality: ScreenModality,
    /// Upper bound on screens sent; middle screens are dropped beyond it.
    pub max_screens: Option<usize>,
}

/// Reasoning attached to an exemplar for chain-of-thought prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotNarrative {
    /// Parenthetical notes appended to individual label lines.
    #[serde(default)]
    pub label_notes: BTreeMap<String, String>,
    pub reasoning: String,
    pub conclusion_level: ImpactLevel,
    pub conclusion_justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub action: String,
    pub labels: Labels,
    /// Verbatim label wording for categories whose rendering differs from the
    /// option display names (e.g. "N/A").
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_text: BTreeMap<String, String>,
    pub impact_level: ImpactLevel,
    pub justification: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<CotNarrative>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarBank {
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarBank {
    pub fn from_json(text: &str, taxonomy: &Taxonomy) -> Result<Self, PromptError> {
        let bank: ExemplarBank =
            serde_json::from_str(text).map_err(|e| PromptError::BankParse(e.to_string()))?;
        bank.validate(taxonomy)?;
        Ok(bank)
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), PromptError> {
        for (index, ex) in self.exemplars.iter().enumerate() {
            taxonomy
                .validate_all(&ex.labels)
                .map_err(|source| PromptError::InvalidExemplar { index, source })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    /// SHA-256 over the canonical JSON form, recorded in run metadata.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("bank serializes").as_bytes())
    }
}

/// The three worked examples shipped with the crate.
pub fn default_exemplar_bank() -> &'static ExemplarBank {
    static BANK: OnceLock<ExemplarBank> = OnceLock::new();
    BANK.get_or_init(|| {
        ExemplarBank::from_json(DEFAULT_EXEMPLARS, crate::taxonomy::default_taxonomy())
            .expect("bundled exemplar bank is valid")
    })
}

/// One line per category: `Name: Question (Option, Option, ...)`.
pub fn knowledge_block(taxonomy: &Taxonomy) -> String {
    taxonomy
        .categories
        .iter()
        .map(|c| {
            let options: Vec<&str> = c.options.iter().map(|o| o.display_name.as_str()).collect();
            if c.question.is_empty() {
                format!("{}: ({})", c.display_name, options.join(", "))
            } else {
                format!("{}: {} ({})", c.display_name, c.question, options.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Surface text for a label set: display names joined by commas, or
/// "No Impact" for an empty set.
pub fn render_label(taxonomy: &Taxonomy, category_id: &str, labels: &LabelSet) -> String {
    if labels.is_empty() {
        return "No Impact".to_string();
    }
    let category = taxonomy.category(category_id);
    let names: Vec<String> = labels
        .options
        .iter()
        .map(|id| {
            category
                .and_then(|c| c.option(id))
                .map(|o| o.display_name.clone())
                .unwrap_or_else(|| id.clone())
        })
        .collect();
    let mut text = names.join(", ");
    if labels.time_bound {
        text.push_str(" Timely");
    }
    text
}

fn exemplar_label_lines(taxonomy: &Taxonomy, ex: &Exemplar, notes: Option<&BTreeMap<String, String>>) -> String {
    let mut lines = Vec::new();
    for c in &taxonomy.categories {
        let Some(set) = ex.labels.get(&c.id) else { continue };
        let mut text = ex
            .label_text
            .get(&c.id)
            .cloned()
            .unwrap_or_else(|| render_label(taxonomy, &c.id, set));
        if let Some(note) = notes.and_then(|n| n.get(&c.id)) {
            text = format!("{text} ({note})");
        }
        lines.push(format!("{}: {}", c.display_name, text));
    }
    lines.join("\n")
}

fn icl_examples(taxonomy: &Taxonomy, bank: &ExemplarBank) -> String {
    bank.exemplars
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            format!(
                "Example {}:\n\nAction: {}\n\n{}\nImpact Level: {}\nJustification: {}",
                i + 1,
                ex.action,
                exemplar_label_lines(taxonomy, ex, None),
                ex.impact_level.title(),
                ex.justification
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn cot_examples(taxonomy: &Taxonomy, bank: &ExemplarBank) -> String {
    bank.exemplars
        .iter()
        .filter_map(|ex| ex.cot.as_ref().map(|cot| (ex, cot)))
        .map(|(ex, cot)| {
            format!(
                "Example Action: {}\n\n{}\nImpact Level: {}\nJustification: {}\n\nReasoning: {}\nImpact Level: {}\nJustification: {}",
                ex.action,
                exemplar_label_lines(taxonomy, ex, Some(&cot.label_notes)),
                ex.impact_level.title(),
                ex.justification,
                cot.reasoning,
                cot.conclusion_level.title(),
                cot.conclusion_justification
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Renders the system text for a strategy.
pub fn system_text(strategy: Strategy, taxonomy: &Taxonomy, bank: Option<&ExemplarBank>) -> Result<String, PromptError> {
    let examples = match strategy {
        Strategy::ZeroShot | Strategy::Kap => String::new(),
        Strategy::Icl => {
            let bank = bank.filter(|b| !b.is_empty()).ok_or(PromptError::MissingBank(strategy))?;
            icl_examples(taxonomy, bank)
        }
        Strategy::Cot => {
            let bank = bank
                .filter(|b| b.exemplars.iter().any(|e| e.cot.is_some()))
                .ok_or(PromptError::MissingBank(strategy))?;
            cot_examples(taxonomy, bank)
        }
    };
    let text = strategy
        .template()
        .replace("{{taxonomy}}", &knowledge_block(taxonomy))
        .replace("{{examples}}", &examples)
        .replace("{{response_contract}}", RESPONSE_CONTRACT.trim_end());
    Ok(text.trim_end().to_string())
}

fn expected_fields(strategy: Strategy, taxonomy: &Taxonomy) -> Vec<String> {
    let mut fields: Vec<String> = if strategy.requests_categories() {
        taxonomy.category_ids().map(str::to_string).collect()
    } else {
        Vec::new()
    };
    fields.push(IMPACT_LEVEL_FIELD.to_string());
    fields
}

/// Indices of screens kept under a budget: the first and last always survive,
/// and the dropped block is centred.
fn kept_screens(count: usize, budget: Option<usize>) -> Vec<usize> {
    match budget {
        Some(max) if count > max.max(2) => {
            let max = max.max(2);
            let tail = max / 2;
            let head = max - tail;
            (0..head).chain(count - tail..count).collect()
        }
        _ => (0..count).collect(),
    }
}

pub fn build_prompt(
    strategy: Strategy,
    trace: &Trace,
    taxonomy: &Taxonomy,
    bank: Option<&ExemplarBank>,
    options: PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if trace.screens.is_empty() {
        return Err(PromptError::EmptyTrace(trace.trace_id.clone()));
    }
    let system_text = system_text(strategy, taxonomy, bank)?;
    let kept = kept_screens(trace.screens.len(), options.max_screens);
    let elided = trace.screens.len() - kept.len();
    let mut parts: Vec<ContentPart> = kept
        .iter()
        .map(|&i| {
            let screen = &trace.screens[i];
            let html = serialize_screen_html(screen);
            match options.modality {
                ScreenModality::Html => ContentPart::ScreenHtml { index: screen.index, html },
                ScreenModality::Image => ContentPart::ScreenImage {
                    index: screen.index,
                    image_ref: screen.image.clone(),
                    html,
                },
            }
        })
        .collect();
    let mut action = format!("Action: {}", trace.action_description);
    if elided > 0 {
        action.push_str(&format!("\n(Note: {elided} intermediate screens were omitted.)"));
    }
    parts.push(ContentPart::Action { text: action });
    Ok(PromptBundle {
        trace_id: trace.trace_id.clone(),
        strategy,
        system_text,
        content_parts: parts,
        expected_fields: expected_fields(strategy, taxonomy),
        elided_screens: elided,
    })
}

/// Collapses whitespace runs to single spaces and trims, for golden comparisons.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
