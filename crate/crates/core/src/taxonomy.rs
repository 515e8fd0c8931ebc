//! The UI action impact taxonomy: categories, option sets and cardinality rules.
//!
//! A [`Taxonomy`] is plain data. The built-in one is returned by
//! [`default_taxonomy`]; custom taxonomies are loaded from the JSON document
//! format with [`load_taxonomy`]. Label sets recorded against a taxonomy are
//! checked with [`Taxonomy::validate_labels`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag of the built-in taxonomy.
pub const DEFAULT_VERSION: &str = "ui-impact-1.0";

/// Version tag given to loaded documents that diverge from the built-in taxonomy.
pub const CUSTOM_VERSION: &str = "custom";

pub const USER_INTENT: &str = "user_intent";
pub const IMPACT_ON_UI: &str = "impact_on_ui";
pub const IMPACT_ON_SELF: &str = "impact_on_self";
pub const IMPACT_ON_OTHERS: &str = "impact_on_others";
pub const REVERSIBILITY: &str = "reversibility";
pub const ROLL_BACK_EFFECTS: &str = "roll_back_effects";
pub const IDEMPOTENCY: &str = "idempotency";
pub const STATEFULNESS: &str = "statefulness";
pub const EXECUTION_VERIFICATION: &str = "execution_verification";
pub const IMPACT_SCOPE: &str = "impact_scope";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy document could not be parsed: {0}")]
    Parse(String),
    #[error("duplicate identifier `{0}`")]
    DuplicateIdentifier(String),
    #[error("category `{0}` has no options")]
    EmptyCategory(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown option `{option}` in category `{category}`")]
    UnknownOption { category: String, option: String },
    #[error("single-label category `{category}` given {count} options")]
    CardinalityViolation { category: String, count: usize },
}

/// Ordinal severity of an action's real-world impact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactLevel {
    #[serde(alias = "minimal")]
    Minimum,
    Moderate,
    Significant,
}

impl ImpactLevel {
    pub const ALL: [ImpactLevel; 3] = [
        ImpactLevel::Minimum,
        ImpactLevel::Moderate,
        ImpactLevel::Significant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ImpactLevel::Minimum => "minimum",
            ImpactLevel::Moderate => "moderate",
            ImpactLevel::Significant => "significant",
        }
    }

    /// Capitalized form used in prompt text ("Moderate").
    pub fn title(self) -> &'static str {
        match self {
            ImpactLevel::Minimum => "Minimum",
            ImpactLevel::Moderate => "Moderate",
            ImpactLevel::Significant => "Significant",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ImpactLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognized impact level `{0}`")]
pub struct ParseLevelError(pub String);

impl FromStr for ImpactLevel {
    type Err = ParseLevelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "minimum" | "minimal" => Ok(ImpactLevel::Minimum),
            "moderate" => Ok(ImpactLevel::Moderate),
            "significant" => Ok(ImpactLevel::Significant),
            other => Err(ParseLevelError(other.to_string())),
        }
    }
}

/// A selectable option within a category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionDef {
    pub id: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_options: Vec<SubOptionDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubOptionDef {
    pub id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    pub display_name: String,
    /// Question text rendered in front of the option list in prompts.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub question: String,
    pub multi_label: bool,
    pub evaluated_by_default: bool,
    pub options: Vec<OptionDef>,
}

impl Category {
    pub fn option(&self, id: &str) -> Option<&OptionDef> {
        self.options.iter().find(|o| o.id == id)
    }

    fn sub_option_parent(&self, sub_id: &str) -> Option<&OptionDef> {
        self.options
            .iter()
            .find(|o| o.sub_options.iter().any(|s| s.id == sub_id))
    }
}

/// Labels chosen for one category. An empty option set is an explicit
/// "no impact / not applicable" answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    pub options: BTreeSet<String>,
    /// Finer transaction/asset kinds; recorded but collapsed to their parent for scoring.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub sub_options: BTreeSet<String>,
    /// Reversal is only possible within a time window.
    #[serde(default, skip_serializing_if = "is_false")]
    pub time_bound: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl LabelSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn of<I, S>(options: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        LabelSet {
            options: options.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }
}

/// Per-category labels keyed by category id.
pub type Labels = BTreeMap<String, LabelSet>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub version: String,
    pub categories: Vec<Category>,
}

impl Taxonomy {
    pub fn category(&self, id: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&Category, TaxonomyError> {
        self.category(id)
            .ok_or_else(|| TaxonomyError::UnknownCategory(id.to_string()))
    }

    pub fn is_multi_label(&self, category_id: &str) -> Result<bool, TaxonomyError> {
        self.require(category_id).map(|c| c.multi_label)
    }

    pub fn option_count(&self) -> usize {
        self.categories.iter().map(|c| c.options.len()).sum()
    }

    pub fn category_ids(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.id.as_str())
    }

    /// Ids of categories scored unless an evaluation asks otherwise.
    pub fn evaluated_by_default(&self) -> Vec<String> {
        self.categories
            .iter()
            .filter(|c| c.evaluated_by_default)
            .map(|c| c.id.clone())
            .collect()
    }

    pub fn validate_labels(&self, category_id: &str, labels: &LabelSet) -> Result<(), TaxonomyError> {
        let category = self.require(category_id)?;
        for option in &labels.options {
            if category.option(option).is_none() {
                return Err(TaxonomyError::UnknownOption {
                    category: category_id.to_string(),
                    option: option.clone(),
                });
            }
        }
        for sub in &labels.sub_options {
            match category.sub_option_parent(sub) {
                Some(parent) if labels.options.contains(&parent.id) => {}
                _ => {
                    return Err(TaxonomyError::UnknownOption {
                        category: category_id.to_string(),
                        option: sub.clone(),
                    })
                }
            }
        }
        if !category.multi_label && labels.options.len() > 1 {
            return Err(TaxonomyError::CardinalityViolation {
                category: category_id.to_string(),
                count: labels.options.len(),
            });
        }
        Ok(())
    }

    /// Validates every entry of a label map.
    pub fn validate_all(&self, labels: &Labels) -> Result<(), TaxonomyError> {
        labels
            .iter()
            .try_for_each(|(category, set)| self.validate_labels(category, set))
    }

    /// Structural checks applied to every loaded taxonomy.
    pub fn check_structure(&self) -> Result<(), TaxonomyError> {
        let mut seen = HashSet::new();
        for category in &self.categories {
            if !seen.insert(category.id.as_str()) {
                return Err(TaxonomyError::DuplicateIdentifier(category.id.clone()));
            }
            if category.options.is_empty() {
                return Err(TaxonomyError::EmptyCategory(category.id.clone()));
            }
            let mut option_ids = HashSet::new();
            for option in &category.options {
                if !option_ids.insert(option.id.as_str()) {
                    return Err(TaxonomyError::DuplicateIdentifier(format!(
                        "{}.{}",
                        category.id, option.id
                    )));
                }
            }
            for option in &category.options {
                for sub in &option.sub_options {
                    if !option_ids.insert(sub.id.as_str()) {
                        return Err(TaxonomyError::DuplicateIdentifier(format!(
                            "{}.{}",
                            category.id, sub.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }
}

/// Loads a taxonomy document. `None` or a blank document yields the default.
///
/// Documents whose categories differ from the built-in set are tagged
/// [`CUSTOM_VERSION`] unless they carry a version of their own.
pub fn load_taxonomy(document: Option<&str>) -> Result<Taxonomy, TaxonomyError> {
    let text = match document {
        Some(text) if !text.trim().is_empty() => text,
        _ => return Ok(default_taxonomy().clone()),
    };

    #[derive(Deserialize)]
    struct Document {
        #[serde(default)]
        version: Option<String>,
        categories: Vec<Category>,
    }

    let doc: Document = serde_json::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
    let default = default_taxonomy();
    let matches_default = doc.categories == default.categories;
    let version = match doc.version {
        Some(v) if !v.is_empty() && (v != DEFAULT_VERSION || matches_default) => v,
        _ if matches_default => DEFAULT_VERSION.to_string(),
        _ => CUSTOM_VERSION.to_string(),
    };
    let taxonomy = Taxonomy {
        version,
        categories: doc.categories,
    };
    taxonomy.check_structure()?;
    Ok(taxonomy)
}

/// Lowercase snake-case identifier for a display name.
pub fn canonical_id(display_name: &str) -> String {
    let mut out = String::new();
    let mut pending_sep = false;
    for ch in display_name.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(ch.to_ascii_lowercase());
        } else if ch == '&' {
            if !out.is_empty() {
                out.push_str("_and");
            }
            pending_sep = true;
        } else {
            pending_sep = true;
        }
    }
    out
}

fn option(display_name: &str) -> OptionDef {
    OptionDef {
        id: canonical_id(display_name),
        display_name: display_name.to_string(),
        sub_options: Vec::new(),
    }
}

fn option_with_kinds(display_name: &str) -> OptionDef {
    let kinds = [
        ("monetary", "Monetary"),
        ("labor", "Labor"),
        ("virtual_assets", "Virtual Assets"),
        ("real_world_object", "Real-world Object"),
    ];
    OptionDef {
        sub_options: kinds
            .iter()
            .map(|(id, name)| SubOptionDef {
                id: id.to_string(),
                display_name: name.to_string(),
            })
            .collect(),
        ..option(display_name)
    }
}

fn category(
    id: &str,
    display_name: &str,
    question: &str,
    multi_label: bool,
    evaluated_by_default: bool,
    options: Vec<OptionDef>,
) -> Category {
    Category {
        id: id.to_string(),
        display_name: display_name.to_string(),
        question: question.to_string(),
        multi_label,
        evaluated_by_default,
        options,
    }
}

fn build_default() -> Taxonomy {
    let categories = vec![
        category(
            USER_INTENT,
            "User Intent",
            "What is the user's primary goal?",
            true,
            true,
            vec![
                option("Information Retrieval"),
                option_with_kinds("Executing Transactions"),
                option("Communication"),
                option("Configuration"),
                option("Navigation & Tutorial"),
            ],
        ),
        category(
            IMPACT_ON_UI,
            "Impact on UI",
            "Does the action modify the user interface?",
            true,
            true,
            vec![
                option("Visual Appearance Changes"),
                option("Content Update"),
                option("Navigational Changes"),
                option("Interactive Elements Activation/Deactivation"),
                option("Feedback Provisioning"),
            ],
        ),
        category(
            IMPACT_ON_SELF,
            "Impact on Self",
            "How does the action affect the user?",
            true,
            true,
            vec![
                option("Acquiring Knowledge"),
                option_with_kinds("Assets Changes"),
                option("Behavioral Changes"),
                option("Privacy and Data Sharing"),
            ],
        ),
        category(
            IMPACT_ON_OTHERS,
            "Impact on Other Users",
            "Does the action affect others?",
            true,
            true,
            vec![
                option("Content Sharing & Information Exchange"),
                option("Privacy and Data Sharing"),
                option("Social Perception Changes"),
            ],
        ),
        category(
            REVERSIBILITY,
            "Reversibility",
            "Can the action be undone? If so, how easy is it?",
            false,
            true,
            vec![
                option("Instantly Reversible"),
                option("Multiple Steps Required"),
                option("Multi-stage Complexity"),
                option("Irreversible Without External Actions"),
            ],
        ),
        category(
            ROLL_BACK_EFFECTS,
            "Roll Back Effects",
            "What happens when the action is reversed?",
            false,
            true,
            vec![
                option("Returning to Initial State"),
                option("Does Not Remove Initial Changes"),
                option("Having Other Side Effects"),
            ],
        ),
        category(
            IDEMPOTENCY,
            "Idempotency",
            "Does repeating the action have the same or different effects?",
            false,
            true,
            vec![
                option("Repeating Has Same Effect"),
                option("Repeating Has Different Effect"),
                option("Repeating Does Not Have Effect"),
            ],
        ),
        category(
            STATEFULNESS,
            "Statefulness",
            "Does the outcome of the action depend on the current state or external factors?",
            false,
            true,
            vec![
                option("Independent of State"),
                option("Dependent on Current State"),
                option("Dependent on External States"),
            ],
        ),
        category(
            EXECUTION_VERIFICATION,
            "Execution Verification",
            "How can the execution be verified?",
            false,
            false,
            vec![
                option("Executing Can Be Easily Verified"),
                option("Can Only Be Externally Verified"),
            ],
        ),
        category(
            IMPACT_SCOPE,
            "Impact Scope",
            "Does the action have immediate, enduring, or future impact?",
            false,
            false,
            vec![
                option("Having Immediate Impact"),
                option("Having Enduring or Subtle Impact"),
                option("Having Impact in the Future"),
            ],
        ),
    ];
    Taxonomy {
        version: DEFAULT_VERSION.to_string(),
        categories,
    }
}

/// The built-in taxonomy (10 categories, 35 options).
pub fn default_taxonomy() -> &'static Taxonomy {
    static DEFAULT: OnceLock<Taxonomy> = OnceLock::new();
    DEFAULT.get_or_init(build_default)
}

/// Golden JSON copy of the default taxonomy shipped with the crate.
pub const DEFAULT_TAXONOMY_JSON: &str = include_str!("../resources/default_taxonomy.json");
