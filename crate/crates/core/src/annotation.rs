//! Dual-annotator gold labeling with skip handling and third-party
//! adjudication, persisted as an append-only event log.
//!
//! Every mutation is an [`Event`]. The in-memory [`WorkflowState`] is a pure
//! fold over the log, so reopening a [`Store`] replays the file and arrives at
//! the state it had before shutdown or a crash.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{ImpactLevel, LabelSet, Labels, Taxonomy, TaxonomyError};
use crate::trace::{Trace, TraceSource};

pub const EVENT_LOG_FILE: &str = "events.jsonl";

/// Pseudo-field naming an impact-level difference in disagreement lists.
pub const IMPACT_LEVEL_FIELD: &str = "impact_level";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("annotator `{0}` is not registered")]
    UnknownAnnotator(String),
    #[error("annotator id `{0}` is already registered")]
    DuplicateId(String),
    #[error("unknown trace `{0}`")]
    UnknownTrace(String),
    #[error("invalid annotation: {0}")]
    Validation(String),
    #[error("annotator `{annotator}` is not assigned to trace `{trace}`")]
    NotAssigned { trace: String, annotator: String },
    #[error("annotator `{annotator}` already submitted for trace `{trace}`")]
    DuplicateSubmission { trace: String, annotator: String },
    #[error("trace `{0}` was retired as incomplete and accepts no further annotations")]
    TraceClosed(String),
    #[error("trace `{trace}` is `{state}`, expected needs_adjudication")]
    WrongState { trace: String, state: String },
    #[error("adjudicator `{0}` cannot adjudicate: primary annotator of the trace or lacking the role")]
    AdjudicatorConflict(String),
    #[error("records belong to different traces `{0}` and `{1}`")]
    TraceMismatch(String, String),
    #[error("event log: {0}")]
    Io(#[from] io::Error),
    #[error("event log line {line} is corrupt: {detail}")]
    CorruptLog { line: usize, detail: String },
}

impl From<TaxonomyError> for AnnotationError {
    fn from(e: TaxonomyError) -> Self {
        AnnotationError::Validation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Annotator,
    Adjudicator,
    Both,
}

impl Role {
    pub fn annotates(self) -> bool {
        matches!(self, Role::Annotator | Role::Both)
    }

    pub fn adjudicates(self) -> bool {
        matches!(self, Role::Adjudicator | Role::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub trace_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub labels: Labels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact_level: Option<ImpactLevel>,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
}

impl AnnotationRecord {
    pub fn skip(trace_id: &str, annotator_id: &str, reason: &str) -> Self {
        AnnotationRecord {
            trace_id: trace_id.into(),
            annotator_id: annotator_id.into(),
            labels: Labels::new(),
            impact_level: None,
            justification: String::new(),
            skipped: true,
            skip_reason: Some(reason.into()),
        }
    }

    /// Skipped records carry nothing; answered records cover every category
    /// with valid labels and carry an impact level.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), AnnotationError> {
        if self.skipped {
            if !self.labels.is_empty() || self.impact_level.is_some() {
                return Err(AnnotationError::Validation("skipped records carry no labels or level".into()));
            }
            return Ok(());
        }
        taxonomy.validate_all(&self.labels)?;
        let missing: Vec<&str> = taxonomy
            .category_ids()
            .filter(|c| !self.labels.contains_key(*c))
            .collect();
        if !missing.is_empty() {
            return Err(AnnotationError::Validation(format!(
                "missing categories: {}",
                missing.join(", ")
            )));
        }
        if self.impact_level.is_none() {
            return Err(AnnotationError::Validation("missing impact_level".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStateKind {
    Unassigned,
    SingleAnnotated,
    /// Transient: both records are in and about to be compared.
    DualAnnotated,
    NeedsAdjudication,
    GoldReady,
    SkippedIncomplete,
}

impl TaskStateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStateKind::Unassigned => "unassigned",
            TaskStateKind::SingleAnnotated => "single_annotated",
            TaskStateKind::DualAnnotated => "dual_annotated",
            TaskStateKind::NeedsAdjudication => "needs_adjudication",
            TaskStateKind::GoldReady => "gold_ready",
            TaskStateKind::SkippedIncomplete => "skipped_incomplete",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStateKind::GoldReady | TaskStateKind::SkippedIncomplete)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskState {
    pub trace_id: String,
    pub state: TaskStateKind,
    pub annotators: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudicator: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disagreements: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Agreement,
    Adjudicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub trace_id: String,
    pub source: TraceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub labels: Labels,
    pub impact_level: ImpactLevel,
    #[serde(default)]
    pub justification: String,
    pub provenance: Provenance,
    pub annotators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Agreement {
    Agree,
    Disagree { fields: Vec<String> },
}

/// Compares two answered records field by field with set semantics.
pub fn detect_disagreement(a: &AnnotationRecord, b: &AnnotationRecord) -> Result<Agreement, AnnotationError> {
    if a.trace_id != b.trace_id {
        return Err(AnnotationError::TraceMismatch(a.trace_id.clone(), b.trace_id.clone()));
    }
    let empty = LabelSet::empty();
    let keys: BTreeSet<&String> = a.labels.keys().chain(b.labels.keys()).collect();
    let mut fields: Vec<String> = keys
        .into_iter()
        .filter(|k| a.labels.get(*k).unwrap_or(&empty) != b.labels.get(*k).unwrap_or(&empty))
        .cloned()
        .collect();
    if a.impact_level != b.impact_level {
        fields.push(IMPACT_LEVEL_FIELD.into());
    }
    Ok(if fields.is_empty() { Agreement::Agree } else { Agreement::Disagree { fields } })
}

/// Median of three ordinal levels.
pub fn median_level(levels: [ImpactLevel; 3]) -> ImpactLevel {
    let mut l = levels;
    l.sort();
    l[1]
}

/// Merges two disagreeing records with an adjudicator's record: an option
/// survives when at least two records chose it; a single-label category where
/// all three answers differ takes the adjudicator's answer.
pub fn merge_labels(taxonomy: &Taxonomy, a: &Labels, b: &Labels, adjudicator: &Labels) -> Labels {
    let empty = LabelSet::empty();
    let mut merged = Labels::new();
    for category in &taxonomy.categories {
        let sets = [a, b, adjudicator].map(|l| l.get(&category.id).unwrap_or(&empty));
        let three_way = sets[0] != sets[1] && sets[1] != sets[2] && sets[0] != sets[2];
        let set = if !category.multi_label && three_way {
            sets[2].clone()
        } else {
            let options = majority(sets.iter().map(|s| &s.options));
            let allowed: BTreeSet<&String> = category
                .options
                .iter()
                .filter(|o| options.contains(&o.id))
                .flat_map(|o| o.sub_options.iter().map(|s| &s.id))
                .collect();
            let sub_options = majority(sets.iter().map(|s| &s.sub_options))
                .into_iter()
                .filter(|s| allowed.contains(s))
                .collect();
            let time_bound = sets.iter().filter(|s| s.time_bound).count() >= 2 && !options.is_empty();
            LabelSet { options, sub_options, time_bound }
        };
        merged.insert(category.id.clone(), set);
    }
    merged
}

fn majority<'a>(sets: impl Iterator<Item = &'a BTreeSet<String>>) -> BTreeSet<String> {
    let mut votes: BTreeMap<&String, usize> = BTreeMap::new();
    for set in sets {
        for item in set {
            *votes.entry(item).or_insert(0) += 1;
        }
    }
    votes.into_iter().filter(|(_, v)| *v >= 2).map(|(k, _)| k.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TraceAdded { trace: Trace },
    AnnotatorRegistered { annotator_id: String, role: Role },
    Assigned { trace_id: String, annotator_id: String },
    Submitted { record: AnnotationRecord },
    Adjudicated { record: AnnotationRecord },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Annotate,
    Adjudicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub trace_id: String,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Task {
    trace: Arc<Trace>,
    assigned: Vec<String>,
    records: Vec<AnnotationRecord>,
    state: TaskStateKind,
    disagreements: Vec<String>,
    adjudication: Option<AnnotationRecord>,
    gold: Option<GoldRecord>,
}

impl Task {
    fn snapshot(&self) -> TaskState {
        TaskState {
            trace_id: self.trace.trace_id.clone(),
            state: self.state,
            annotators: self.assigned.clone(),
            adjudicator: self.adjudication.as_ref().map(|r| r.annotator_id.clone()),
            disagreements: self.disagreements.clone(),
        }
    }

    fn submitted_by(&self, annotator: &str) -> bool {
        self.records.iter().any(|r| r.annotator_id == annotator)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub total_traces: usize,
    pub gold_ready: usize,
    pub agreement: usize,
    pub adjudicated: usize,
    pub skipped_incomplete: usize,
    pub needs_adjudication: usize,
    pub in_progress: usize,
    pub unassigned: usize,
    pub skipped_by_source: BTreeMap<TraceSource, usize>,
    pub skip_reasons: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldExport {
    pub records: Vec<GoldRecord>,
    pub summary: ExportSummary,
}

impl GoldExport {
    /// Gold records as JSON Lines.
    pub fn to_jsonl(&self) -> String {
        write_gold_jsonl(&self.records)
    }
}

pub fn write_gold_jsonl(records: &[GoldRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("gold records serialize") + "\n")
        .collect()
}

/// Parses gold JSON Lines and validates each record against the taxonomy.
pub fn import_gold(text: &str, taxonomy: &Taxonomy) -> Result<Vec<GoldRecord>, AnnotationError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GoldRecord = serde_json::from_str(line)
            .map_err(|e| AnnotationError::CorruptLog { line: i + 1, detail: e.to_string() })?;
        taxonomy.validate_all(&record.labels)?;
        out.push(record);
    }
    Ok(out)
}

/// The workflow as a fold over events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkflowState {
    annotators: BTreeMap<String, Role>,
    tasks: BTreeMap<String, Task>,
}

impl WorkflowState {
    fn task(&self, trace_id: &str) -> Result<&Task, AnnotationError> {
        self.tasks
            .get(trace_id)
            .ok_or_else(|| AnnotationError::UnknownTrace(trace_id.into()))
    }

    fn role(&self, annotator: &str) -> Result<Role, AnnotationError> {
        self.annotators
            .get(annotator)
            .copied()
            .ok_or_else(|| AnnotationError::UnknownAnnotator(annotator.into()))
    }

    /// Checks that `event` may be applied, without changing anything.
    pub fn check(&self, event: &Event, taxonomy: &Taxonomy) -> Result<(), AnnotationError> {
        match event {
            Event::TraceAdded { trace } => {
                if self.tasks.contains_key(&trace.trace_id) {
                    return Err(AnnotationError::Validation(format!("trace `{}` already loaded", trace.trace_id)));
                }
            }
            Event::AnnotatorRegistered { annotator_id, .. } => {
                if annotator_id.trim().is_empty() {
                    return Err(AnnotationError::Validation("annotator id is empty".into()));
                }
                if self.annotators.contains_key(annotator_id) {
                    return Err(AnnotationError::DuplicateId(annotator_id.clone()));
                }
            }
            Event::Assigned { trace_id, annotator_id } => {
                if !self.role(annotator_id)?.annotates() {
                    return Err(AnnotationError::Validation(format!("`{annotator_id}` is adjudicator-only")));
                }
                let task = self.task(trace_id)?;
                if task.assigned.contains(annotator_id) || task.assigned.len() >= 2 || task.state.is_terminal() {
                    return Err(AnnotationError::Validation(format!(
                        "trace `{trace_id}` cannot be assigned to `{annotator_id}`"
                    )));
                }
            }
            Event::Submitted { record } => {
                self.role(&record.annotator_id)?;
                let task = self.task(&record.trace_id)?;
                if task.submitted_by(&record.annotator_id) {
                    return Err(AnnotationError::DuplicateSubmission {
                        trace: record.trace_id.clone(),
                        annotator: record.annotator_id.clone(),
                    });
                }
                if !task.assigned.contains(&record.annotator_id) {
                    return Err(AnnotationError::NotAssigned {
                        trace: record.trace_id.clone(),
                        annotator: record.annotator_id.clone(),
                    });
                }
                if task.state == TaskStateKind::SkippedIncomplete {
                    return Err(AnnotationError::TraceClosed(record.trace_id.clone()));
                }
                record.validate(taxonomy)?;
            }
            Event::Adjudicated { record } => {
                let task = self.task(&record.trace_id)?;
                if task.state != TaskStateKind::NeedsAdjudication {
                    return Err(AnnotationError::WrongState {
                        trace: record.trace_id.clone(),
                        state: task.state.as_str().into(),
                    });
                }
                let role = self.role(&record.annotator_id)?;
                if !role.adjudicates() || task.assigned.contains(&record.annotator_id) {
                    return Err(AnnotationError::AdjudicatorConflict(record.annotator_id.clone()));
                }
                if record.skipped {
                    return Err(AnnotationError::Validation("adjudication cannot be a skip".into()));
                }
                record.validate(taxonomy)?;
            }
        }
        Ok(())
    }

    /// Applies a checked event.
    pub fn apply(&mut self, event: Event, taxonomy: &Taxonomy) {
        match event {
            Event::TraceAdded { trace } => {
                let id = trace.trace_id.clone();
                self.tasks.insert(
                    id,
                    Task {
                        trace: Arc::new(trace),
                        assigned: Vec::new(),
                        records: Vec::new(),
                        state: TaskStateKind::Unassigned,
                        disagreements: Vec::new(),
                        adjudication: None,
                        gold: None,
                    },
                );
            }
            Event::AnnotatorRegistered { annotator_id, role } => {
                self.annotators.insert(annotator_id, role);
            }
            Event::Assigned { trace_id, annotator_id } => {
                if let Some(task) = self.tasks.get_mut(&trace_id) {
                    task.assigned.push(annotator_id);
                }
            }
            Event::Submitted { record } => {
                let Some(task) = self.tasks.get_mut(&record.trace_id) else { return };
                let skipped = record.skipped;
                task.records.push(record);
                if skipped {
                    task.state = TaskStateKind::SkippedIncomplete;
                } else if task.records.len() == 1 {
                    task.state = TaskStateKind::SingleAnnotated;
                } else {
                    task.state = TaskStateKind::DualAnnotated;
                    let (a, b) = (&task.records[0], &task.records[1]);
                    match detect_disagreement(a, b).expect("records share a trace") {
                        Agreement::Agree => {
                            task.gold = Some(GoldRecord {
                                trace_id: a.trace_id.clone(),
                                source: task.trace.source,
                                domain: task.trace.domain.clone(),
                                labels: a.labels.clone(),
                                impact_level: a.impact_level.expect("validated"),
                                justification: a.justification.clone(),
                                provenance: Provenance::Agreement,
                                annotators: vec![a.annotator_id.clone(), b.annotator_id.clone()],
                            });
                            task.state = TaskStateKind::GoldReady;
                        }
                        Agreement::Disagree { fields } => {
                            task.disagreements = fields;
                            task.state = TaskStateKind::NeedsAdjudication;
                        }
                    }
                }
            }
            Event::Adjudicated { record } => {
                let Some(task) = self.tasks.get_mut(&record.trace_id) else { return };
                let (a, b) = (&task.records[0], &task.records[1]);
                let level = median_level([
                    a.impact_level.expect("validated"),
                    b.impact_level.expect("validated"),
                    record.impact_level.expect("validated"),
                ]);
                task.gold = Some(GoldRecord {
                    trace_id: record.trace_id.clone(),
                    source: task.trace.source,
                    domain: task.trace.domain.clone(),
                    labels: merge_labels(taxonomy, &a.labels, &b.labels, &record.labels),
                    impact_level: level,
                    justification: record.justification.clone(),
                    provenance: Provenance::Adjudicated,
                    annotators: vec![a.annotator_id.clone(), b.annotator_id.clone(), record.annotator_id.clone()],
                });
                task.adjudication = Some(record);
                task.state = TaskStateKind::GoldReady;
            }
        }
    }

    pub fn trace(&self, trace_id: &str) -> Option<Arc<Trace>> {
        self.tasks.get(trace_id).map(|t| t.trace.clone())
    }

    pub fn task_state(&self, trace_id: &str) -> Option<TaskState> {
        self.tasks.get(trace_id).map(Task::snapshot)
    }

    pub fn records(&self, trace_id: &str) -> Vec<AnnotationRecord> {
        self.tasks.get(trace_id).map(|t| t.records.clone()).unwrap_or_default()
    }

    /// Open primary assignment for `annotator`, or the next trace they have
    /// not touched with the fewest completed annotations.
    fn pick_annotation(&self, annotator: &str) -> Option<(String, bool)> {
        let open = self.tasks.values().find(|t| {
            !t.state.is_terminal() && t.assigned.iter().any(|a| a == annotator) && !t.submitted_by(annotator)
        });
        if let Some(t) = open {
            return Some((t.trace.trace_id.clone(), false));
        }
        self.tasks
            .values()
            .filter(|t| {
                matches!(t.state, TaskStateKind::Unassigned | TaskStateKind::SingleAnnotated)
                    && t.assigned.len() < 2
                    && !t.assigned.iter().any(|a| a == annotator)
            })
            .min_by_key(|t| (t.records.len(), std::cmp::Reverse(t.assigned.len())))
            .map(|t| (t.trace.trace_id.clone(), true))
    }

    pub fn pending_adjudications(&self) -> Vec<TaskState> {
        self.tasks
            .values()
            .filter(|t| t.state == TaskStateKind::NeedsAdjudication)
            .map(Task::snapshot)
            .collect()
    }

    pub fn export_gold(&self, source: Option<TraceSource>) -> GoldExport {
        let mut summary = ExportSummary::default();
        let mut records = Vec::new();
        for task in self.tasks.values() {
            if source.is_some_and(|s| s != task.trace.source) {
                continue;
            }
            summary.total_traces += 1;
            match task.state {
                TaskStateKind::GoldReady => {
                    summary.gold_ready += 1;
                    let gold = task.gold.clone().expect("gold_ready carries gold");
                    match gold.provenance {
                        Provenance::Agreement => summary.agreement += 1,
                        Provenance::Adjudicated => summary.adjudicated += 1,
                    }
                    records.push(gold);
                }
                TaskStateKind::SkippedIncomplete => {
                    summary.skipped_incomplete += 1;
                    *summary.skipped_by_source.entry(task.trace.source).or_insert(0) += 1;
                    if let Some(reason) = task.records.iter().find_map(|r| r.skip_reason.clone()) {
                        summary.skip_reasons.insert(task.trace.trace_id.clone(), reason);
                    }
                }
                TaskStateKind::NeedsAdjudication => summary.needs_adjudication += 1,
                TaskStateKind::Unassigned if task.assigned.is_empty() => summary.unassigned += 1,
                _ => summary.in_progress += 1,
            }
        }
        GoldExport { records, summary }
    }
}

struct Inner {
    state: WorkflowState,
    log: Option<File>,
}

/// Thread-safe workflow store. Writes are serialized; each accepted event is
/// appended to the log before it becomes visible.
pub struct Store {
    taxonomy: Arc<Taxonomy>,
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl Store {
    /// A store without persistence.
    pub fn in_memory(taxonomy: Arc<Taxonomy>) -> Self {
        Store {
            taxonomy,
            path: None,
            inner: Mutex::new(Inner { state: WorkflowState::default(), log: None }),
        }
    }

    /// Opens (or creates) the event log in `dir` and replays it. A torn final
    /// line left by a crash is dropped and the file truncated to the last
    /// complete event.
    pub fn open(dir: &Path, taxonomy: Arc<Taxonomy>) -> Result<Self, AnnotationError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(EVENT_LOG_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let mut state = WorkflowState::default();
        let mut valid_len = 0usize;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        for (i, raw) in lines.iter().enumerate() {
            let complete = raw.ends_with('\n');
            let line = raw.trim_end_matches('\n');
            if line.trim().is_empty() {
                valid_len += raw.len();
                continue;
            }
            match serde_json::from_str::<Event>(line) {
                Ok(event) => {
                    state
                        .check(&event, &taxonomy)
                        .map_err(|e| AnnotationError::CorruptLog { line: i + 1, detail: e.to_string() })?;
                    state.apply(event, &taxonomy);
                    valid_len += raw.len();
                    if !complete {
                        valid_len = text.len();
                    }
                }
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(AnnotationError::CorruptLog { line: i + 1, detail: e.to_string() }),
            }
        }
        let mut log = OpenOptions::new().create(true).append(true).open(&path)?;
        if valid_len < text.len() {
            log.set_len(valid_len as u64)?;
        } else if !text.is_empty() && !text.ends_with('\n') {
            log.write_all(b"\n")?;
        }
        Ok(Store {
            taxonomy,
            path: Some(path),
            inner: Mutex::new(Inner { state, log: Some(log) }),
        })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(&self, inner: &mut Inner, event: Event) -> Result<(), AnnotationError> {
        inner.state.check(&event, &self.taxonomy)?;
        if let Some(log) = inner.log.as_mut() {
            let mut line = serde_json::to_string(&event).expect("events serialize");
            line.push('\n');
            log.write_all(line.as_bytes())?;
            log.flush()?;
        }
        inner.state.apply(event, &self.taxonomy);
        Ok(())
    }

    /// Loads traces not yet present; returns how many were added.
    pub fn add_traces(&self, traces: impl IntoIterator<Item = Trace>) -> Result<usize, AnnotationError> {
        let mut inner = self.lock();
        let mut added = 0;
        for trace in traces {
            if inner.state.tasks.contains_key(&trace.trace_id) {
                continue;
            }
            self.commit(&mut inner, Event::TraceAdded { trace })?;
            added += 1;
        }
        Ok(added)
    }

    pub fn register_annotator(&self, id: &str, role: Role) -> Result<(), AnnotationError> {
        let mut inner = self.lock();
        self.commit(&mut inner, Event::AnnotatorRegistered { annotator_id: id.into(), role })
    }

    /// Next unit of work for `annotator`: a primary annotation when the role
    /// allows one, otherwise an adjudication they are eligible for.
    pub fn next_task(&self, annotator: &str) -> Result<Option<Assignment>, AnnotationError> {
        let mut inner = self.lock();
        let role = inner.state.role(annotator)?;
        if role.annotates() {
            if let Some((trace_id, fresh)) = inner.state.pick_annotation(annotator) {
                if fresh {
                    self.commit(
                        &mut inner,
                        Event::Assigned { trace_id: trace_id.clone(), annotator_id: annotator.into() },
                    )?;
                }
                return Ok(Some(Assignment { trace_id, kind: TaskKind::Annotate }));
            }
        }
        if role.adjudicates() {
            let pending = inner
                .state
                .tasks
                .values()
                .find(|t| t.state == TaskStateKind::NeedsAdjudication && !t.assigned.iter().any(|a| a == annotator));
            if let Some(t) = pending {
                return Ok(Some(Assignment { trace_id: t.trace.trace_id.clone(), kind: TaskKind::Adjudicate }));
            }
        }
        Ok(None)
    }

    pub fn submit_annotation(&self, record: AnnotationRecord) -> Result<TaskState, AnnotationError> {
        let mut inner = self.lock();
        let trace_id = record.trace_id.clone();
        self.commit(&mut inner, Event::Submitted { record })?;
        Ok(inner.state.task_state(&trace_id).expect("trace exists"))
    }

    pub fn submit_adjudication(&self, record: AnnotationRecord) -> Result<GoldRecord, AnnotationError> {
        let mut inner = self.lock();
        let trace_id = record.trace_id.clone();
        self.commit(&mut inner, Event::Adjudicated { record })?;
        Ok(inner.state.tasks[&trace_id].gold.clone().expect("adjudication yields gold"))
    }

    pub fn pending_adjudications(&self) -> Vec<TaskState> {
        self.lock().state.pending_adjudications()
    }

    pub fn export_gold(&self, source: Option<TraceSource>) -> GoldExport {
        self.lock().state.export_gold(source)
    }

    pub fn trace(&self, trace_id: &str) -> Option<Arc<Trace>> {
        self.lock().state.trace(trace_id)
    }

    pub fn task_state(&self, trace_id: &str) -> Option<TaskState> {
        self.lock().state.task_state(trace_id)
    }

    pub fn records(&self, trace_id: &str) -> Vec<AnnotationRecord> {
        self.lock().state.records(trace_id)
    }

    /// Copy of the derived state, for comparisons after replay.
    pub fn snapshot(&self) -> WorkflowState {
        self.lock().state.clone()
    }

    /// Forces buffered log writes to disk.
    pub fn sync(&self) -> Result<(), AnnotationError> {
        if let Some(log) = self.lock().log.as_mut() {
            log.sync_all()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{default_taxonomy, IDEMPOTENCY, REVERSIBILITY, USER_INTENT};
    use crate::trace::fixtures;
    use proptest::prelude::*;

    fn tax() -> Arc<Taxonomy> {
        Arc::new(default_taxonomy().clone())
    }

    pub(crate) fn answer(trace: &str, who: &str, level: ImpactLevel) -> AnnotationRecord {
        let labels = default_taxonomy()
            .categories
            .iter()
            .map(|c| (c.id.clone(), LabelSet::of([c.options[0].id.clone()])))
            .collect();
        AnnotationRecord {
            trace_id: trace.into(),
            annotator_id: who.into(),
            labels,
            impact_level: Some(level),
            justification: format!("{who} says so"),
            skipped: false,
            skip_reason: None,
        }
    }

    fn with_label(mut r: AnnotationRecord, cat: &str, opts: &[&str]) -> AnnotationRecord {
        r.labels.insert(cat.into(), LabelSet::of(opts.iter().copied()));
        r
    }

    fn store(n: usize) -> Store {
        let s = Store::in_memory(tax());
        s.add_traces((0..n).map(|i| fixtures::trace(&format!("t{i}"), vec![fixtures::screen(0, vec![])])))
            .unwrap();
        s.register_annotator("a1", Role::Annotator).unwrap();
        s.register_annotator("a2", Role::Annotator).unwrap();
        s.register_annotator("adj", Role::Adjudicator).unwrap();
        s
    }

    #[test]
    fn register_rules() {
        let s = store(1);
        assert!(matches!(s.register_annotator("a1", Role::Both), Err(AnnotationError::DuplicateId(_))));
        assert_eq!(
            s.next_task("adj").unwrap(),
            None,
            "adjudicator-only ids get no primary work"
        );
        assert!(matches!(s.next_task("zz"), Err(AnnotationError::UnknownAnnotator(_))));
    }

    #[test]
    fn agreement_path() {
        let s = store(1);
        assert_eq!(s.next_task("a1").unwrap().unwrap().trace_id, "t0");
        assert_eq!(s.next_task("a2").unwrap().unwrap().trace_id, "t0");
        let st = s.submit_annotation(answer("t0", "a1", ImpactLevel::Moderate)).unwrap();
        assert_eq!(st.state, TaskStateKind::SingleAnnotated);
        let st = s.submit_annotation(answer("t0", "a2", ImpactLevel::Moderate)).unwrap();
        assert_eq!(st.state, TaskStateKind::GoldReady);
        let export = s.export_gold(None);
        assert_eq!(export.records[0].provenance, Provenance::Agreement);
        assert_eq!(export.records[0].annotators.len(), 2);
        assert_eq!(s.next_task("a1").unwrap(), None);
    }

    #[test]
    fn never_reassigned_and_errors() {
        let s = store(2);
        let t = s.next_task("a1").unwrap().unwrap().trace_id;
        assert_eq!(s.next_task("a1").unwrap().unwrap().trace_id, t, "open assignment is returned again");
        s.submit_annotation(answer(&t, "a1", ImpactLevel::Minimum)).unwrap();
        let next = s.next_task("a1").unwrap().unwrap().trace_id;
        assert_ne!(next, t);
        assert!(matches!(
            s.submit_annotation(answer(&t, "a1", ImpactLevel::Minimum)),
            Err(AnnotationError::DuplicateSubmission { .. })
        ));
        assert!(matches!(
            s.submit_annotation(answer(&t, "a2", ImpactLevel::Minimum)),
            Err(AnnotationError::NotAssigned { .. })
        ));
        let mut partial = answer(&next, "a1", ImpactLevel::Minimum);
        partial.labels.remove(USER_INTENT);
        assert!(matches!(s.submit_annotation(partial), Err(AnnotationError::Validation(_))));
        let bad = with_label(answer(&next, "a1", ImpactLevel::Minimum), IDEMPOTENCY, &["repeating_has_same_effect", "repeating_has_different_effect"]);
        assert!(matches!(s.submit_annotation(bad), Err(AnnotationError::Validation(_))));
    }

    #[test]
    fn skip_retires_trace() {
        let s = store(1);
        s.next_task("a1").unwrap();
        s.next_task("a2").unwrap();
        let st = s
            .submit_annotation(AnnotationRecord::skip("t0", "a1", "password change screen never reached"))
            .unwrap();
        assert_eq!(st.state, TaskStateKind::SkippedIncomplete);
        assert!(matches!(
            s.submit_annotation(answer("t0", "a2", ImpactLevel::Minimum)),
            Err(AnnotationError::TraceClosed(_))
        ));
        let export = s.export_gold(None);
        assert!(export.records.is_empty());
        assert_eq!(export.summary.skipped_incomplete, 1);
        assert_eq!(s.next_task("a2").unwrap(), None);
    }

    #[test]
    fn adjudication_path() {
        let s = store(1);
        s.next_task("a1").unwrap();
        s.next_task("a2").unwrap();
        s.submit_annotation(answer("t0", "a1", ImpactLevel::Minimum)).unwrap();
        let st = s
            .submit_annotation(with_label(answer("t0", "a2", ImpactLevel::Significant), REVERSIBILITY, &["irreversible_without_external_actions"]))
            .unwrap();
        assert_eq!(st.state, TaskStateKind::NeedsAdjudication);
        assert_eq!(st.disagreements, vec![REVERSIBILITY.to_string(), IMPACT_LEVEL_FIELD.to_string()]);
        assert_eq!(s.pending_adjudications().len(), 1);
        assert_eq!(s.next_task("adj").unwrap().unwrap().kind, TaskKind::Adjudicate);
        assert!(matches!(
            s.submit_adjudication(answer("t0", "a1", ImpactLevel::Moderate)),
            Err(AnnotationError::AdjudicatorConflict(_))
        ));
        let gold = s.submit_adjudication(answer("t0", "adj", ImpactLevel::Moderate)).unwrap();
        assert_eq!(gold.impact_level, ImpactLevel::Moderate);
        assert_eq!(gold.labels[REVERSIBILITY], LabelSet::of(["instantly_reversible"]));
        assert_eq!(gold.provenance, Provenance::Adjudicated);
        assert_eq!(gold.annotators, vec!["a1", "a2", "adj"]);
        assert!(matches!(
            s.submit_adjudication(answer("t0", "adj", ImpactLevel::Moderate)),
            Err(AnnotationError::WrongState { .. })
        ));
    }

    #[test]
    fn disagreement_examples() {
        let a = answer("t", "a1", ImpactLevel::Moderate);
        assert_eq!(detect_disagreement(&a, &a).unwrap(), Agreement::Agree);
        let b = answer("t", "a2", ImpactLevel::Significant);
        assert_eq!(
            detect_disagreement(&a, &b).unwrap(),
            Agreement::Disagree { fields: vec![IMPACT_LEVEL_FIELD.into()] }
        );
        let x = with_label(a.clone(), USER_INTENT, &["communication", "configuration"]);
        let y = with_label(a.clone(), USER_INTENT, &["configuration", "communication"]);
        assert_eq!(detect_disagreement(&x, &y).unwrap(), Agreement::Agree);
        let other = answer("u", "a2", ImpactLevel::Moderate);
        assert!(matches!(detect_disagreement(&a, &other), Err(AnnotationError::TraceMismatch(..))));
    }

    #[test]
    fn merge_rules() {
        use ImpactLevel::*;
        assert_eq!(median_level([Minimum, Significant, Moderate]), Moderate);
        let t = default_taxonomy();
        let labels = |cat: &str, opts: &[&str]| Labels::from([(cat.to_string(), LabelSet::of(opts.iter().copied()))]);
        let m = merge_labels(t, &labels(USER_INTENT, &["communication"]), &labels(USER_INTENT, &["configuration"]), &labels(USER_INTENT, &["communication"]));
        assert_eq!(m[USER_INTENT], LabelSet::of(["communication"]));
        let m = merge_labels(
            t,
            &labels(USER_INTENT, &["communication", "configuration"]),
            &labels(USER_INTENT, &["configuration"]),
            &labels(USER_INTENT, &["communication"]),
        );
        assert_eq!(m[USER_INTENT], LabelSet::of(["communication", "configuration"]));
        let r = |o: &str| labels(REVERSIBILITY, &[o]);
        let m = merge_labels(t, &r("instantly_reversible"), &r("multiple_steps_required"), &r("multi_stage_complexity"));
        assert_eq!(m[REVERSIBILITY], LabelSet::of(["multi_stage_complexity"]), "three-way tie takes the adjudicator");
        let m = merge_labels(t, &r("instantly_reversible"), &labels(REVERSIBILITY, &[]), &labels(REVERSIBILITY, &[]));
        assert!(m[REVERSIBILITY].is_empty());
    }

    #[test]
    fn crash_replay_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let traces: Vec<Trace> = (0..3).map(|i| fixtures::trace(&format!("t{i}"), vec![fixtures::screen(0, vec![])])).collect();
        let before = {
            let s = Store::open(dir.path(), tax()).unwrap();
            s.add_traces(traces.clone()).unwrap();
            s.register_annotator("a1", Role::Both).unwrap();
            s.register_annotator("a2", Role::Annotator).unwrap();
            s.next_task("a1").unwrap();
            s.next_task("a2").unwrap();
            s.submit_annotation(answer("t0", "a1", ImpactLevel::Minimum)).unwrap();
            s.snapshot()
        };
        let path = dir.path().join(EVENT_LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"event":"submitted","record":{"trace_id":"t0","annot"#).unwrap();
        drop(f);
        let s = Store::open(dir.path(), tax()).unwrap();
        assert_eq!(s.snapshot(), before);
        assert_eq!(s.add_traces(traces).unwrap(), 0);
        s.submit_annotation(answer("t0", "a2", ImpactLevel::Minimum)).unwrap();
        let after = s.snapshot();
        drop(s);
        assert_eq!(Store::open(dir.path(), tax()).unwrap().snapshot(), after);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(EVENT_LOG_FILE), "garbage\n{\"event\":\"annotator_registered\",\"annotator_id\":\"a\",\"role\":\"both\"}\n").unwrap();
        assert!(matches!(Store::open(dir.path(), tax()), Err(AnnotationError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn export_filter_and_round_trip() {
        let s = Store::in_memory(tax());
        let mut m = fixtures::trace("m", vec![fixtures::screen(0, vec![])]);
        m.source = TraceSource::Motif;
        s.add_traces([m, fixtures::trace("x", vec![fixtures::screen(0, vec![])])]).unwrap();
        s.register_annotator("a1", Role::Annotator).unwrap();
        s.register_annotator("a2", Role::Annotator).unwrap();
        for _ in 0..2 {
            for who in ["a1", "a2"] {
                let t = s.next_task(who).unwrap().unwrap().trace_id;
                s.submit_annotation(answer(&t, who, ImpactLevel::Moderate)).unwrap();
            }
        }
        let all = s.export_gold(None);
        assert_eq!(all.records.iter().map(|r| r.trace_id.as_str()).collect::<Vec<_>>(), ["m", "x"]);
        let motif = s.export_gold(Some(TraceSource::Motif));
        assert_eq!(motif.records.len(), 1);
        assert_eq!(motif.records[0].source, TraceSource::Motif);
        assert_eq!(import_gold(&all.to_jsonl(), default_taxonomy()).unwrap(), all.records);

        let empty = Store::in_memory(tax()).export_gold(None);
        assert!(empty.records.is_empty());
        assert_eq!(empty.summary, ExportSummary::default());
    }

    #[test]
    fn concurrent_submissions_linearize() {
        let s = Arc::new(store(1));
        s.next_task("a1").unwrap();
        s.next_task("a2").unwrap();
        let handles: Vec<_> = ["a1", "a2", "a1", "a2"]
            .into_iter()
            .map(|who| {
                let s = s.clone();
                std::thread::spawn(move || s.submit_annotation(answer("t0", who, ImpactLevel::Minimum)).is_ok())
            })
            .collect();
        let ok = handles.into_iter().map(|h| h.join().unwrap()).filter(|x| *x).count();
        assert_eq!(ok, 2);
        assert_eq!(s.task_state("t0").unwrap().state, TaskStateKind::GoldReady);
    }

    fn arb_record(trace: &'static str, who: &'static str) -> impl Strategy<Value = AnnotationRecord> {
        (0usize..3, any::<bool>(), any::<bool>()).prop_map(move |(lvl, flip, skip)| {
            if skip {
                return AnnotationRecord::skip(trace, who, "incomplete");
            }
            let r = answer(trace, who, ImpactLevel::ALL[lvl]);
            if flip {
                with_label(r, REVERSIBILITY, &["irreversible_without_external_actions"])
            } else {
                r
            }
        })
    }

    proptest! {
        #[test]
        fn states_never_regress(ops in prop::collection::vec((0usize..3, arb_record("t0", "a1"), arb_record("t0", "a2"), arb_record("t0", "adj")), 1..12)) {
            let s = store(1);
            let mut reached_terminal: Option<TaskStateKind> = None;
            for (op, r1, r2, r3) in ops {
                let _ = match op {
                    0 => s.next_task(if r1.skipped { "a1" } else { "a2" }).map(|_| ()),
                    1 => s.submit_annotation(if r2.skipped { r1 } else { r2 }).map(|_| ()),
                    _ => s.submit_adjudication(r3).map(|_| ()),
                };
                let st = s.task_state("t0").unwrap();
                prop_assert_ne!(st.state, TaskStateKind::DualAnnotated);
                if let Some(t) = reached_terminal {
                    prop_assert_eq!(st.state, t);
                }
                if st.state.is_terminal() {
                    reached_terminal = Some(st.state);
                }
                if st.state == TaskStateKind::GoldReady {
                    let gold = &s.export_gold(None).records[0];
                    prop_assert_eq!(gold.provenance == Provenance::Agreement, gold.annotators.len() == 2);
                    prop_assert!(default_taxonomy().validate_all(&gold.labels).is_ok());
                }
            }
        }
    }
}
