//! End-to-end evaluation runs and their on-disk reports.
//!
//! A report directory holds `summary.json`, `category_accuracy.csv`,
//! `impact_confusion.csv`, `per_item.jsonl` and `run_meta.json`. Every
//! aggregate can be recomputed from `per_item.jsonl` with [`summarize`], which
//! is what [`verify_report`] does.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::GoldRecord;
use crate::eval::{
    category_accuracy, impact_from_matrix, percent, ConfusionMatrix, EvalConfig, EvalError, InvalidPolicy,
    LabeledPair,
};
use crate::gateway::{classify_all, redaction_for, Backend, Capability, Outcome, Redaction};
use crate::prompt::{build_prompt, ExemplarBank, PromptError, PromptOptions, ScreenModality, Strategy};
use crate::taxonomy::{ImpactLevel, Labels, Taxonomy};
use crate::trace::Trace;

pub const CONTENT_ORDER: &str = "system_text,screens,action";

pub const SUMMARY_FILE: &str = "summary.json";
pub const CATEGORY_CSV: &str = "category_accuracy.csv";
pub const CONFUSION_CSV: &str = "impact_confusion.csv";
pub const PER_ITEM_FILE: &str = "per_item.jsonl";
pub const META_FILE: &str = "run_meta.json";

/// Marker written in place of a redacted cell.
pub const REDACTED: &str = "redacted";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("report io: {0}")]
    Io(#[from] io::Error),
    #[error("report file `{file}` is malformed: {detail}")]
    Malformed { file: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub backend: String,
    pub capability: Capability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub temperature: f64,
    pub strategy: Strategy,
    pub theta: f64,
    pub invalid_policy: InvalidPolicy,
    pub validity_floor: f64,
    /// Categories scored in this run; empty for strategies that ask only for a level.
    pub categories: Vec<String>,
    pub taxonomy_version: String,
    pub template_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_bank_hash: Option<String>,
    pub content_order: String,
    pub corpus_traces: usize,
    pub gold_records: usize,
    pub scored_items: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub trace_id: String,
    pub gold_level: ImpactLevel,
    /// Gold labels for the scored categories.
    #[serde(default)]
    pub gold_labels: Labels,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category_id: String,
    pub n: usize,
    pub hits: usize,
    pub invalid: usize,
    pub accuracy: f64,
    pub redaction: Redaction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactRow {
    pub n: usize,
    pub correct: usize,
    pub invalid: usize,
    pub accuracy: f64,
    pub redaction: Redaction,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub backend: String,
    pub strategy: Strategy,
    pub items: usize,
    pub impact: ImpactRow,
    pub categories: Vec<CategoryRow>,
    /// Invalid answers by reason.
    pub invalid_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: RunMeta,
    pub summary: RunSummary,
    pub items: Vec<ItemRecord>,
}

/// Builds prompts for every gold-covered trace, classifies them with
/// `backend` and scores the outcomes. Traces without gold are not sent.
pub fn evaluate_run(
    traces: &[Trace],
    golds: &[GoldRecord],
    backend: &dyn Backend,
    strategy: Strategy,
    config: &EvalConfig,
    taxonomy: &Taxonomy,
    bank: Option<&ExemplarBank>,
) -> Result<RunReport, RunError> {
    config.validate()?;
    let backend_config = backend.config();
    let options = PromptOptions {
        modality: match backend_config.capability {
            Capability::Multimodal => ScreenModality::Image,
            Capability::TextOnly => ScreenModality::Html,
        },
        max_screens: None,
    };
    let by_id: BTreeMap<&str, &Trace> = traces.iter().map(|t| (t.trace_id.as_str(), t)).collect();
    let mut covered: Vec<(&GoldRecord, &Trace)> = golds
        .iter()
        .filter_map(|g| by_id.get(g.trace_id.as_str()).map(|t| (g, *t)))
        .collect();
    covered.sort_by(|a, b| a.0.trace_id.cmp(&b.0.trace_id));

    let mut warnings = Vec::new();
    if covered.is_empty() {
        warnings.push("no gold record matches a corpus trace; metrics are empty".to_string());
    } else if covered.len() < golds.len() {
        warnings.push(format!(
            "{} gold records have no matching trace in the corpus",
            golds.len() - covered.len()
        ));
    }

    let bundles = covered
        .iter()
        .map(|(_, t)| build_prompt(strategy, t, taxonomy, bank, options))
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes = classify_all(&bundles, backend, taxonomy);

    let categories: Vec<String> = if strategy.requests_categories() {
        config.categories.clone()
    } else {
        Vec::new()
    };
    let items: Vec<ItemRecord> = covered
        .iter()
        .zip(outcomes)
        .map(|((gold, _), outcome)| ItemRecord {
            trace_id: gold.trace_id.clone(),
            gold_level: gold.impact_level,
            gold_labels: categories
                .iter()
                .map(|c| (c.clone(), gold.labels.get(c).cloned().unwrap_or_default()))
                .collect(),
            outcome,
        })
        .collect();

    let meta = RunMeta {
        backend: backend_config.name.clone(),
        capability: backend_config.capability,
        model: backend_config.model.clone(),
        temperature: backend_config.temperature,
        strategy,
        theta: config.theta,
        invalid_policy: config.invalid_policy,
        validity_floor: config.validity_floor,
        categories,
        taxonomy_version: taxonomy.version.clone(),
        template_hash: strategy.template_hash(),
        exemplar_bank_hash: if strategy.needs_bank() { bank.map(ExemplarBank::hash) } else { None },
        content_order: CONTENT_ORDER.to_string(),
        corpus_traces: traces.len(),
        gold_records: golds.len(),
        scored_items: items.len(),
        warnings,
    };
    let summary = summarize(&meta, &items)?;
    Ok(RunReport { meta, summary, items })
}

/// Aggregates per-item records into the run summary.
pub fn summarize(meta: &RunMeta, items: &[ItemRecord]) -> Result<RunSummary, RunError> {
    let mut confusion = ConfusionMatrix::default();
    let mut invalid_reasons = BTreeMap::new();
    for item in items {
        confusion.add(item.gold_level, item.outcome.impact_level());
        if let Outcome::Invalid(inv) = &item.outcome {
            *invalid_reasons.entry(inv.reason.as_str().to_string()).or_insert(0) += 1;
        }
    }
    let impact = impact_from_matrix(confusion, meta.invalid_policy);
    let valid_levels = items.len() - impact.invalid;
    let config = EvalConfig {
        theta: meta.theta,
        invalid_policy: meta.invalid_policy,
        categories: meta.categories.clone(),
        validity_floor: meta.validity_floor,
    };
    let mut categories = Vec::new();
    for category_id in &meta.categories {
        let pairs: Vec<LabeledPair> = items
            .iter()
            .map(|item| LabeledPair {
                item: item.trace_id.clone(),
                category_id: category_id.clone(),
                predicted: item.outcome.labels_for(category_id).map(|s| s.options.clone()),
                gold: item.gold_labels.get(category_id).map(|s| s.options.clone()).unwrap_or_default(),
            })
            .collect();
        let row = match category_accuracy(&pairs, &config) {
            Ok(acc) => CategoryRow {
                category_id: acc.category_id,
                n: acc.n,
                hits: acc.hits,
                invalid: acc.invalid,
                accuracy: acc.accuracy,
                redaction: acc.redaction,
            },
            Err(EvalError::EmptyInput(_)) => CategoryRow {
                category_id: category_id.clone(),
                n: 0,
                hits: 0,
                invalid: 0,
                accuracy: 0.0,
                redaction: Redaction::Redacted,
            },
            Err(e) => return Err(e.into()),
        };
        categories.push(row);
    }
    Ok(RunSummary {
        backend: meta.backend.clone(),
        strategy: meta.strategy,
        items: items.len(),
        impact: ImpactRow {
            n: impact.n,
            correct: impact.correct,
            invalid: impact.invalid,
            accuracy: impact.accuracy,
            redaction: redaction_for(valid_levels, items.len(), meta.validity_floor),
            confusion,
        },
        categories,
        invalid_reasons,
    })
}

fn cell(accuracy: f64, redaction: Redaction) -> String {
    match redaction {
        Redaction::Reported => percent(accuracy),
        Redaction::Redacted => REDACTED.to_string(),
    }
}

/// Column label of a run in combined tables.
pub fn run_label(meta: &RunMeta) -> String {
    format!("{}/{}", meta.backend, meta.strategy.as_str())
}

pub fn category_csv(summary: &RunSummary) -> String {
    let mut out = format!("category,{}\n", summary.strategy.as_str());
    for row in &summary.categories {
        out.push_str(&format!("{},{}\n", row.category_id, cell(row.accuracy, row.redaction)));
    }
    out
}

pub fn confusion_csv(summary: &RunSummary) -> String {
    let m = &summary.impact.confusion;
    let mut out = String::from("gold\\predicted,minimum,moderate,significant,invalid\n");
    for level in ImpactLevel::ALL {
        let i = level.index();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            level.as_str(),
            m.cells[i][0],
            m.cells[i][1],
            m.cells[i][2],
            m.invalid[i]
        ));
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report values serialize") + "\n"
}

fn items_jsonl(items: &[ItemRecord]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("items serialize") + "\n")
        .collect()
}

/// Writes the five report files; contents depend only on the inputs.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SUMMARY_FILE), pretty(&report.summary))?;
    fs::write(dir.join(CATEGORY_CSV), category_csv(&report.summary))?;
    fs::write(dir.join(CONFUSION_CSV), confusion_csv(&report.summary))?;
    fs::write(dir.join(PER_ITEM_FILE), items_jsonl(&report.items))?;
    fs::write(dir.join(META_FILE), pretty(&report.meta))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, file: &str) -> Result<T, RunError> {
    let text = fs::read_to_string(dir.join(file))?;
    serde_json::from_str(&text).map_err(|e| RunError::Malformed { file: file.into(), detail: e.to_string() })
}

/// Reads a report directory as written by [`write_report`].
pub fn read_report(dir: &Path) -> Result<RunReport, RunError> {
    let meta: RunMeta = read_json(dir, META_FILE)?;
    let summary: RunSummary = read_json(dir, SUMMARY_FILE)?;
    let text = fs::read_to_string(dir.join(PER_ITEM_FILE))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(line).map_err(|e| RunError::Malformed {
            file: PER_ITEM_FILE.into(),
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(RunReport { meta, summary, items })
}

/// A report whose aggregates were recomputed from its per-item records.
#[derive(Debug, Clone)]
pub struct VerifiedReport {
    pub meta: RunMeta,
    pub recomputed: RunSummary,
    /// Stored files that disagree with the recomputation.
    pub mismatches: Vec<String>,
}

pub fn verify_report(dir: &Path) -> Result<VerifiedReport, RunError> {
    let stored = read_report(dir)?;
    let recomputed = summarize(&stored.meta, &stored.items)?;
    let mut mismatches = Vec::new();
    if stored.summary != recomputed {
        mismatches.push(SUMMARY_FILE.to_string());
    }
    for (file, expected) in [(CATEGORY_CSV, category_csv(&recomputed)), (CONFUSION_CSV, confusion_csv(&recomputed))] {
        if fs::read_to_string(dir.join(file))? != expected {
            mismatches.push(file.to_string());
        }
    }
    if stored.meta.scored_items != stored.items.len() {
        mismatches.push(META_FILE.to_string());
    }
    Ok(VerifiedReport { meta: stored.meta, recomputed, mismatches })
}

/// Impact-level accuracy with strategies as rows and backends as columns.
pub fn impact_table_csv(runs: &[(RunMeta, RunSummary)]) -> String {
    let backends: Vec<&str> = unique(runs.iter().map(|(m, _)| m.backend.as_str()));
    let strategies: BTreeSet<Strategy> = runs.iter().map(|(m, _)| m.strategy).collect();
    let mut out = format!("strategy,{}\n", backends.join(","));
    for strategy in strategies {
        let cells: Vec<String> = backends
            .iter()
            .map(|b| {
                runs.iter()
                    .find(|(m, _)| m.backend == *b && m.strategy == strategy)
                    .map(|(_, s)| cell(s.impact.accuracy, s.impact.redaction))
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&format!("{},{}\n", strategy.as_str(), cells.join(",")));
    }
    out
}

/// Per-category accuracy with categories as rows and one column per run that
/// scored categories.
pub fn category_table_csv(runs: &[(RunMeta, RunSummary)]) -> String {
    let scored: Vec<&(RunMeta, RunSummary)> = runs.iter().filter(|(m, _)| !m.categories.is_empty()).collect();
    let categories: Vec<&str> = unique(scored.iter().flat_map(|(m, _)| m.categories.iter().map(String::as_str)));
    let header: Vec<String> = scored.iter().map(|(m, _)| run_label(m)).collect();
    let mut out = format!("category,{}\n", header.join(","));
    for category in categories {
        let cells: Vec<String> = scored
            .iter()
            .map(|(_, s)| {
                s.categories
                    .iter()
                    .find(|r| r.category_id == category)
                    .map(|r| cell(r.accuracy, r.redaction))
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&format!("{category},{}\n", cells.join(",")));
    }
    out
}

fn unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else { return String::new() };
    let cols = header.split(',').count();
    let mut out = format!("| {} |\n|{}\n", header.replace(',', " | "), "---|".repeat(cols));
    for line in lines {
        out.push_str(&format!("| {} |\n", line.replace(',', " | ")));
    }
    out
}

/// Text rendering of a confusion matrix with row totals.
pub fn confusion_text(summary: &RunSummary) -> String {
    let m = &summary.impact.confusion;
    let sums = m.row_sums();
    let mut out = format!("{:<13}{:>10}{:>10}{:>13}{:>9}{:>7}\n", "gold\\pred", "minimum", "moderate", "significant", "invalid", "total");
    for level in ImpactLevel::ALL {
        let i = level.index();
        out.push_str(&format!(
            "{:<13}{:>10}{:>10}{:>13}{:>9}{:>7}\n",
            level.as_str(),
            m.cells[i][0],
            m.cells[i][1],
            m.cells[i][2],
            m.invalid[i],
            sums[i] + m.invalid[i]
        ));
    }
    out
}

/// Markdown report over one or more runs: impact accuracy, per-category
/// accuracy and a confusion matrix per run.
pub fn render_markdown(runs: &[(RunMeta, RunSummary)]) -> String {
    let mut out = String::from("## Impact level accuracy (%)\n\n");
    out.push_str(&csv_to_markdown(&impact_table_csv(runs)));
    let categories = category_table_csv(runs);
    if categories.lines().count() > 1 {
        out.push_str("\n## Category accuracy (%)\n\n");
        out.push_str(&csv_to_markdown(&categories));
    }
    for (meta, summary) in runs {
        out.push_str(&format!("\n## Confusion matrix: {}\n\n```\n{}```\n", run_label(meta), confusion_text(summary)));
        if !summary.invalid_reasons.is_empty() {
            let reasons: Vec<String> = summary.invalid_reasons.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("\ninvalid answers: {}\n", reasons.join(", ")));
        }
    }
    out
}
