//! Maps a classified action to an execution decision through a user policy.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{classify, classify_all, Backend, Capability, Outcome};
use crate::prompt::{build_prompt, ExemplarBank, PromptError, PromptOptions, ScreenModality, Strategy};
use crate::taxonomy::{ImpactLevel, Taxonomy};
use crate::trace::{ElementKind, Trace};

/// Ordered from most to least permissive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    AutoExecute,
    ConfirmWithSummary,
    DeferToHuman,
}

impl DecisionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionKind::AutoExecute => "auto_execute",
            DecisionKind::ConfirmWithSummary => "confirm_with_summary",
            DecisionKind::DeferToHuman => "defer_to_human",
        }
    }
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefaultMapping {
    pub minimum: DecisionKind,
    pub moderate: DecisionKind,
    pub significant: DecisionKind,
}

impl Default for DefaultMapping {
    fn default() -> Self {
        DefaultMapping {
            minimum: DecisionKind::AutoExecute,
            moderate: DecisionKind::ConfirmWithSummary,
            significant: DecisionKind::DeferToHuman,
        }
    }
}

impl DefaultMapping {
    pub fn get(&self, level: ImpactLevel) -> DecisionKind {
        match level {
            ImpactLevel::Minimum => self.minimum,
            ImpactLevel::Moderate => self.moderate,
            ImpactLevel::Significant => self.significant,
        }
    }

    fn is_monotone(&self) -> bool {
        self.minimum <= self.moderate && self.moderate <= self.significant
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Matches when the category's labels include this option.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Matches when the predicted impact level is exactly this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals_level: Option<ImpactLevel>,
    /// Matches when the category has no usable answer.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub invalid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Effect {
    Force(DecisionKind),
    RaiseTo(ImpactLevel),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(rename = "if")]
    pub when: Predicate,
    #[serde(rename = "then")]
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Policy {
    #[serde(default)]
    pub default_mapping: DefaultMapping,
    #[serde(default)]
    pub allow_downgrades: bool,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy document could not be parsed: {0}")]
    Parse(String),
    #[error("rule {index}: {detail}")]
    InvalidRule { index: usize, detail: String },
    #[error("default mapping relaxes a higher level; set allow_downgrades to permit this")]
    DowngradingMapping,
}

impl Policy {
    pub fn from_json(text: &str, taxonomy: &Taxonomy) -> Result<Self, PolicyError> {
        let policy: Policy = serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        policy.validate(taxonomy)?;
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policies serialize")
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), PolicyError> {
        if !self.allow_downgrades && !self.default_mapping.is_monotone() {
            return Err(PolicyError::DowngradingMapping);
        }
        for (index, rule) in self.rules.iter().enumerate() {
            let bad = |detail: String| PolicyError::InvalidRule { index, detail };
            let p = &rule.when;
            let kinds = usize::from(p.contains.is_some()) + usize::from(p.equals_level.is_some()) + usize::from(p.invalid);
            if kinds != 1 {
                return Err(bad("exactly one of contains, equals_level, invalid is required".into()));
            }
            if p.contains.is_some() || p.invalid {
                let Some(cat) = &p.category else {
                    return Err(bad("category is required".into()));
                };
                let category = taxonomy.require(cat).map_err(|e| bad(e.to_string()))?;
                if let Some(opt) = &p.contains {
                    if category.option(opt).is_none() {
                        return Err(bad(format!("unknown option `{opt}` in `{cat}`")));
                    }
                }
            }
            if rule.effect == Effect::Force(DecisionKind::AutoExecute) && !self.allow_downgrades {
                return Err(bad("forcing auto_execute requires allow_downgrades".into()));
            }
        }
        Ok(())
    }

    /// True when no rule can make a higher level yield a more permissive
    /// decision than a lower one.
    pub fn is_monotone(&self) -> bool {
        !self.allow_downgrades && self.rules.iter().all(|r| r.when.equals_level.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub decision: DecisionKind,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_rule: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_text: Option<String>,
}

impl Decision {
    fn defer(rationale: impl Into<String>) -> Self {
        Decision {
            decision: DecisionKind::DeferToHuman,
            rationale: rationale.into(),
            matched_rule: None,
            summary_text: None,
        }
    }
}

fn matches(p: &Predicate, outcome: &Outcome, level: ImpactLevel) -> bool {
    if let Some(l) = p.equals_level {
        return l == level;
    }
    let Some(cat) = &p.category else { return false };
    let labels = outcome.labels_for(cat);
    if p.invalid {
        return labels.is_none();
    }
    match (&p.contains, labels) {
        (Some(opt), Some(set)) => set.options.contains(opt),
        _ => false,
    }
}

/// First matching rule wins; otherwise the default mapping applies. Invalid
/// answers, and predictions without a level, always defer.
pub fn apply_policy(outcome: &Outcome, policy: &Policy) -> Decision {
    let level = match outcome {
        Outcome::Invalid(inv) => {
            return Decision::defer(format!("invalid answer ({})", inv.reason.as_str()));
        }
        Outcome::Prediction(p) => match p.impact_level {
            Some(l) => l,
            None => return Decision::defer("prediction carries no impact level"),
        },
    };
    let baseline = policy.default_mapping.get(level);
    for (index, rule) in policy.rules.iter().enumerate() {
        if !matches(&rule.when, outcome, level) {
            continue;
        }
        let (decision, rationale) = match &rule.effect {
            Effect::RaiseTo(raise) => {
                let effective = level.max(*raise);
                (
                    policy.default_mapping.get(effective),
                    format!("rule {index} raised level {level} to {effective}"),
                )
            }
            Effect::Force(forced) if policy.allow_downgrades => (*forced, format!("rule {index} forced {forced}")),
            Effect::Force(forced) => (
                (*forced).max(baseline),
                format!("rule {index} forced {forced} (never below the {level} default)"),
            ),
        };
        return Decision { decision, rationale, matched_rule: Some(index), summary_text: None };
    }
    Decision {
        decision: baseline,
        rationale: format!("default mapping for {level}"),
        matched_rule: None,
        summary_text: None,
    }
}

const SUMMARY_ELEMENTS: usize = 8;

/// Template summary of what the action will do, built from the action
/// description and the text shown on the final screen.
pub fn summarize(trace: &Trace) -> String {
    let mut out = format!("{} in {}.", trace.action_description.trim_end_matches('.'), trace.app_name);
    let Some(last) = trace.screens.last() else { return out };
    let mut elements: Vec<_> = last
        .elements
        .iter()
        .filter(|e| !e.text.trim().is_empty() && !matches!(e.kind, ElementKind::Image | ElementKind::Icon))
        .collect();
    elements.sort_by_key(|e| (e.bounds.y, e.bounds.x));
    let mut seen = Vec::new();
    for e in elements {
        let text = e.text.trim();
        if !seen.contains(&text) {
            seen.push(text);
        }
        if seen.len() == SUMMARY_ELEMENTS {
            break;
        }
    }
    if !seen.is_empty() {
        out.push_str(" Final screen shows: ");
        out.push_str(&seen.join("; "));
        out.push('.');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub trace_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

fn options_for(backend: &dyn Backend) -> PromptOptions {
    PromptOptions {
        modality: match backend.config().capability {
            Capability::Multimodal => ScreenModality::Image,
            Capability::TextOnly => ScreenModality::Html,
        },
        max_screens: None,
    }
}

fn finish(trace: &Trace, outcome: Outcome, policy: &Policy) -> Assessment {
    let mut decision = apply_policy(&outcome, policy);
    if decision.decision == DecisionKind::ConfirmWithSummary {
        decision.summary_text = Some(summarize(trace));
    }
    Assessment { trace_id: trace.trace_id.clone(), decision, outcome: Some(outcome) }
}

fn unbuildable(trace: &Trace, e: &PromptError) -> Assessment {
    Assessment {
        trace_id: trace.trace_id.clone(),
        decision: Decision::defer(format!("prompt could not be built: {e}")),
        outcome: None,
    }
}

/// Classifies `trace` and applies `policy`. Any failure along the way
/// degrades to defer_to_human.
pub fn assess(
    trace: &Trace,
    strategy: Strategy,
    backend: &dyn Backend,
    taxonomy: &Taxonomy,
    bank: Option<&ExemplarBank>,
    policy: &Policy,
) -> Assessment {
    match build_prompt(strategy, trace, taxonomy, bank, options_for(backend)) {
        Ok(bundle) => finish(trace, classify(&bundle, backend, taxonomy), policy),
        Err(e) => unbuildable(trace, &e),
    }
}

/// [`assess`] over many traces, classifying within the backend's parallelism
/// limit. Results keep input order.
pub fn assess_all(
    traces: &[Trace],
    strategy: Strategy,
    backend: &dyn Backend,
    taxonomy: &Taxonomy,
    bank: Option<&ExemplarBank>,
    policy: &Policy,
) -> Vec<Assessment> {
    let options = options_for(backend);
    let built: Vec<_> = traces.iter().map(|t| build_prompt(strategy, t, taxonomy, bank, options)).collect();
    let bundles: Vec<_> = built.iter().filter_map(|b| b.as_ref().ok().cloned()).collect();
    let mut outcomes = classify_all(&bundles, backend, taxonomy).into_iter();
    traces
        .iter()
        .zip(&built)
        .map(|(trace, b)| match b {
            Ok(_) => finish(trace, outcomes.next().expect("one outcome per bundle"), policy),
            Err(e) => unbuildable(trace, e),
        })
        .collect()
}
