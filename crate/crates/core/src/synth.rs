//! Seeded generators for fixture corpora, gold sets, replay stores and
//! scripted annotation sessions.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    AnnotationError, AnnotationRecord, GoldExport, GoldRecord, Provenance, Role, Store, WorkflowState, EVENT_LOG_FILE,
};
use crate::gateway::{serialize_prediction, BackendConfig, Capability, Prediction, ReplayRecord};
use crate::prompt::Strategy;
use crate::taxonomy::{
    Category, ImpactLevel, LabelSet, Labels, Taxonomy, IDEMPOTENCY, REVERSIBILITY, USER_INTENT,
};
use crate::trace::{ElementKind, Screen, Trace, TraceSource, UiElement};

const DOMAINS: [(&str, &[&str]); 8] = [
    ("shopping", &["Shop", "Marketplace", "Grocer"]),
    ("communication", &["Messages", "Mail", "Chat"]),
    ("finance", &["Bank", "Wallet", "Budget"]),
    ("social", &["Feed", "Photos", "Forum"]),
    ("settings", &["Settings", "Accounts", "Security"]),
    ("productivity", &["Notes", "Calendar", "Files"]),
    ("travel", &["Maps", "Rides", "Flights"]),
    ("entertainment", &["Music", "Video", "Games"]),
];

const ACTIONS: [&str; 8] = [
    "Place the order for the items in the cart",
    "Send the drafted message to the group",
    "Transfer 20 dollars to a saved contact",
    "Post the selected photo publicly",
    "Change the account password",
    "Delete the selected note",
    "Book the cheapest ride home",
    "Subscribe to the premium plan",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn synth_screen(trace_id: &str, index: usize, rng: &mut ChaCha8Rng) -> Screen {
    let count = rng.random_range(2..=5);
    let elements = (0..count)
        .map(|i| {
            let kind = if i == 0 {
                ElementKind::Text
            } else {
                *[ElementKind::Button, ElementKind::Text, ElementKind::Input, ElementKind::Checkbox]
                    .choose(rng)
                    .expect("non-empty")
            };
            UiElement {
                id: format!("s{index}e{i}"),
                kind,
                text: format!("{} {}", kind.as_str(), rng.random_range(1..100)),
                bounds: [40, 200 + 220 * i as u32, 1000, 160].into(),
                clickable: matches!(kind, ElementKind::Button | ElementKind::Checkbox),
            }
        })
        .collect();
    Screen {
        index,
        image: format!("screens/{trace_id}/{index}.png"),
        width: 1080,
        height: 2400,
        elements,
    }
}

/// `n` traces with ids `{prefix}-0001`, ... from `source`.
pub fn synth_corpus(n: usize, prefix: &str, source: TraceSource, seed: u64) -> Vec<Trace> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let trace_id = format!("{prefix}-{:04}", i + 1);
            let (domain, apps) = DOMAINS[rng.random_range(0..DOMAINS.len())];
            let app = apps[rng.random_range(0..apps.len())];
            let screens = (0..rng.random_range(1..=4)).map(|s| synth_screen(&trace_id, s, &mut rng)).collect();
            Trace {
                trace_id,
                app_name: app.to_string(),
                action_description: ACTIONS[rng.random_range(0..ACTIONS.len())].to_string(),
                source,
                domain: Some(domain.to_string()),
                screens,
            }
        })
        .collect()
}

fn random_set(category: &Category, rng: &mut ChaCha8Rng) -> LabelSet {
    let ids: Vec<&str> = category.options.iter().map(|o| o.id.as_str()).collect();
    let mut set = if category.multi_label {
        let k = match rng.random_range(0..10) {
            0 => 0,
            1..=6 => 1,
            _ => 2,
        };
        LabelSet::of(ids.choose_multiple(rng, k).copied())
    } else {
        LabelSet::of([*ids.choose(rng).expect("non-empty")])
    };
    for option in category.options.iter().filter(|o| set.options.contains(&o.id)) {
        if !option.sub_options.is_empty() && rng.random_bool(0.5) {
            set.sub_options.insert(option.sub_options[0].id.clone());
        }
    }
    if category.id == REVERSIBILITY && set.options.contains("multiple_steps_required") {
        set.time_bound = rng.random_bool(0.3);
    }
    set
}

/// Complete, valid labels for every category.
pub fn random_labels(taxonomy: &Taxonomy, rng: &mut ChaCha8Rng) -> Labels {
    taxonomy
        .categories
        .iter()
        .map(|c| (c.id.clone(), random_set(c, rng)))
        .collect()
}

/// A set for `category` that differs from `gold`.
fn perturb(category: &Category, gold: &LabelSet, rng: &mut ChaCha8Rng) -> LabelSet {
    let others: Vec<&str> = category
        .options
        .iter()
        .map(|o| o.id.as_str())
        .filter(|o| !gold.options.contains(*o))
        .collect();
    if !category.multi_label {
        return LabelSet::of([*others.choose(rng).expect("single-label categories have 2+ options")]);
    }
    let mut set = LabelSet::of(gold.options.iter().cloned());
    if set.options.is_empty() || (rng.random_bool(0.5) && !others.is_empty()) {
        set.options.insert(others.choose(rng).expect("non-empty").to_string());
    } else {
        let drop = set.options.iter().next().cloned().expect("non-empty");
        set.options.remove(&drop);
    }
    set
}

/// Gold records for `traces` with exactly `counts` minimum/moderate/significant levels.
pub fn synth_golds(traces: &[Trace], counts: [usize; 3], taxonomy: &Taxonomy, seed: u64) -> Vec<GoldRecord> {
    assert_eq!(counts.iter().sum::<usize>(), traces.len(), "level counts must cover the corpus");
    let mut rng = rng(seed);
    let mut levels: Vec<ImpactLevel> = ImpactLevel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(l, k)| std::iter::repeat_n(*l, k))
        .collect();
    levels.shuffle(&mut rng);
    traces
        .iter()
        .zip(levels)
        .map(|(t, level)| GoldRecord {
            trace_id: t.trace_id.clone(),
            source: t.source,
            domain: t.domain.clone(),
            labels: random_labels(taxonomy, &mut rng),
            impact_level: level,
            justification: format!("{} has {} consequences.", t.action_description, level.as_str()),
            provenance: Provenance::Agreement,
            annotators: vec!["a1".into(), "a2".into()],
        })
        .collect()
}

/// Shape of one (backend, strategy) cell of a replay store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub backend: String,
    pub strategy: Strategy,
    /// Items with an unusable answer.
    pub invalid: usize,
    /// Valid items whose impact level matches gold.
    pub correct: usize,
    /// Chance that a category's predicted labels equal gold.
    pub label_accuracy: f64,
    /// Categories left out of this many valid answers.
    #[serde(default)]
    pub missing: Vec<(String, usize)>,
}

const INVALID_RESPONSES: [&str; 4] = [
    "I'm sorry, but I can't determine the consequences of this action from the screens provided.",
    "{\"User Intent\": [\"Communication\"], \"Impact on UI\": [\"Navigation\"], \"impact le",
    "```json\n{\"impact level\": \"catastrophic\", \"justification\": \"irreversible\"}\n```",
    "Impact level: moderate. The action sends a message.",
];

fn wrap(json: String, variant: usize) -> String {
    match variant {
        0 => json,
        1 => format!("```json\n{json}\n```"),
        _ => format!("Here is my assessment of the action.\n\n{json}\n\nLet me know if you need more detail."),
    }
}

/// Replay records realizing `cell` against `golds`.
pub fn synth_cell(cell: &CellSpec, traces: &[Trace], golds: &[GoldRecord], taxonomy: &Taxonomy, seed: u64) -> Vec<ReplayRecord> {
    let n = golds.len();
    assert!(cell.invalid + cell.correct <= n, "cell asks for more items than the gold set holds");
    let mut rng = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut role = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        role[i] = if rank < cell.invalid {
            2
        } else if rank < cell.invalid + cell.correct {
            1
        } else {
            0
        };
    }
    let valid: Vec<usize> = (0..n).filter(|i| role[*i] != 2).collect();
    let mut missing: HashMap<usize, Vec<&str>> = HashMap::new();
    for (category, count) in &cell.missing {
        for &i in valid.choose_multiple(&mut rng, *count) {
            missing.entry(i).or_default().push(category);
        }
    }
    let actions: HashMap<&str, &str> = traces.iter().map(|t| (t.trace_id.as_str(), t.action_description.as_str())).collect();
    golds
        .iter()
        .enumerate()
        .map(|(i, gold)| {
            let raw_response = if role[i] == 2 {
                INVALID_RESPONSES[rng.random_range(0..INVALID_RESPONSES.len())].to_string()
            } else {
                let level = if role[i] == 1 {
                    gold.impact_level
                } else {
                    *ImpactLevel::ALL
                        .iter()
                        .filter(|l| **l != gold.impact_level)
                        .collect::<Vec<_>>()
                        .choose(&mut rng)
                        .copied()
                        .expect("two other levels")
                };
                let mut labels = Labels::new();
                if cell.strategy.requests_categories() {
                    for category in &taxonomy.categories {
                        let g = gold.labels.get(&category.id).cloned().unwrap_or_default();
                        let set = if rng.random_bool(cell.label_accuracy) { g } else { perturb(category, &g, &mut rng) };
                        if !missing.get(&i).is_some_and(|m| m.contains(&category.id.as_str())) {
                            labels.insert(category.id.clone(), set);
                        }
                    }
                }
                let action = actions.get(gold.trace_id.as_str()).copied().unwrap_or("The action");
                let reasoning = match cell.strategy {
                    Strategy::Cot => format!(
                        "Reasoning: {action} was reviewed screen by screen before deciding. The impact is {}.",
                        level.as_str()
                    ),
                    _ => format!("{action} has {} impact.", level.as_str()),
                };
                let prediction = Prediction {
                    trace_id: gold.trace_id.clone(),
                    strategy: cell.strategy,
                    backend: cell.backend.clone(),
                    impact_level: Some(level),
                    labels,
                    reasoning_text: Some(reasoning),
                    raw_response: String::new(),
                };
                wrap(serialize_prediction(&prediction, taxonomy), rng.random_range(0..3))
            };
            ReplayRecord {
                trace_id: gold.trace_id.clone(),
                strategy: cell.strategy,
                backend: cell.backend.clone(),
                raw_response,
            }
        })
        .collect()
}

pub const REPLAY_ITEMS: usize = 209;
/// Gold level counts of the replay fixture: 26.8% / 49.3% / 23.9%.
pub const REPLAY_LEVELS: [usize; 3] = [56, 103, 50];
pub const MULTIMODAL_BACKEND: &str = "vision-replay";
pub const TEXT_BACKEND: &str = "text-replay";

fn spec(backend: &str, strategy: Strategy, invalid: usize, correct: usize, acc: f64, missing: &[(&str, usize)]) -> CellSpec {
    CellSpec {
        backend: backend.into(),
        strategy,
        invalid,
        correct,
        label_accuracy: acc,
        missing: missing.iter().map(|(c, k)| (c.to_string(), *k)).collect(),
    }
}

/// The eight cells of the bundled replay fixture. The multimodal backend's
/// chain-of-thought cell is the best one at 122 of 209 correct.
pub fn replay_cells() -> Vec<CellSpec> {
    use Strategy::*;
    vec![
        spec(MULTIMODAL_BACKEND, ZeroShot, 0, 96, 0.0, &[]),
        spec(MULTIMODAL_BACKEND, Kap, 3, 104, 0.62, &[]),
        spec(MULTIMODAL_BACKEND, Icl, 2, 111, 0.7, &[]),
        spec(MULTIMODAL_BACKEND, Cot, 0, 122, 0.74, &[]),
        spec(TEXT_BACKEND, ZeroShot, 14, 84, 0.0, &[]),
        spec(TEXT_BACKEND, Kap, 9, 90, 0.55, &[("roll_back_effects", 120)]),
        spec(TEXT_BACKEND, Icl, 6, 97, 0.6, &[]),
        spec(TEXT_BACKEND, Cot, 118, 40, 0.5, &[]),
    ]
}

#[derive(Debug, Clone)]
pub struct ReplayFixture {
    pub traces: Vec<Trace>,
    pub golds: Vec<GoldRecord>,
    pub backends: Vec<BackendConfig>,
    pub records: Vec<ReplayRecord>,
}

/// Corpus, gold set, backend configs and replay store for the bundled
/// two-backend, four-strategy evaluation fixture.
pub fn replay_fixture(taxonomy: &Taxonomy, seed: u64) -> ReplayFixture {
    let traces = synth_corpus(REPLAY_ITEMS, "syn", TraceSource::Synthesized, seed);
    let golds = synth_golds(&traces, REPLAY_LEVELS, taxonomy, seed.wrapping_add(1));
    let records = replay_cells()
        .iter()
        .enumerate()
        .flat_map(|(i, cell)| synth_cell(cell, &traces, &golds, taxonomy, seed.wrapping_add(100 + i as u64)))
        .collect();
    let mut backends = vec![
        BackendConfig::replay(MULTIMODAL_BACKEND, Capability::Multimodal),
        BackendConfig::replay(TEXT_BACKEND, Capability::TextOnly),
    ];
    for b in &mut backends {
        b.replay_path = Some("replay.jsonl".into());
    }
    ReplayFixture { traces, golds, backends, records }
}

/// Scripted path of one trace through the annotation workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Agree,
    /// Primary annotator 0 or 1 skips.
    Skip { by: usize },
    LevelOnly,
    SingleLabelMajority,
    MultiLabelMajority,
    ThreeWayTie,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedGold {
    pub labels: Labels,
    pub impact_level: ImpactLevel,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct ScriptedTrace {
    pub trace: Trace,
    pub kind: ScriptKind,
    /// Records of the two primary annotators and the adjudicator.
    pub records: [AnnotationRecord; 3],
    pub expected: Option<ExpectedGold>,
}

pub const ANNOTATORS: [&str; 2] = ["ann-1", "ann-2"];
pub const ADJUDICATOR: &str = "adj-1";

const SKIP_REASONS: [&str; 3] = [
    "password change screen never reached",
    "action never completed on screens",
    "trace ends before the final confirmation",
];

fn answered(trace_id: &str, who: &str, labels: Labels, level: ImpactLevel) -> AnnotationRecord {
    AnnotationRecord {
        trace_id: trace_id.into(),
        annotator_id: who.into(),
        labels,
        impact_level: Some(level),
        justification: format!("{who}: {} impact", level.as_str()),
        skipped: false,
        skip_reason: None,
    }
}

fn with_set(labels: &Labels, category: &str, options: &[&str]) -> Labels {
    let mut l = labels.clone();
    l.insert(category.into(), LabelSet::of(options.iter().copied()));
    l
}

/// A session over `n` traces where `skips` are skipped by one annotator and
/// `disagreements` need adjudication; each trace carries the gold it must
/// end with, worked out by hand for its kind.
pub fn annotation_script(n: usize, skips: usize, disagreements: usize, taxonomy: &Taxonomy, seed: u64) -> Vec<ScriptedTrace> {
    assert!(skips + disagreements <= n);
    let mut rng = rng(seed);
    let traces = synth_corpus(n, "ann", TraceSource::Synthesized, seed);
    let disagreement_kinds = [
        ScriptKind::LevelOnly,
        ScriptKind::SingleLabelMajority,
        ScriptKind::MultiLabelMajority,
        ScriptKind::ThreeWayTie,
    ];
    let mut kinds: Vec<ScriptKind> = (0..skips)
        .map(|i| ScriptKind::Skip { by: i % 2 })
        .chain((0..disagreements).map(|i| disagreement_kinds[i % disagreement_kinds.len()]))
        .chain(std::iter::repeat_n(ScriptKind::Agree, n - skips - disagreements))
        .collect();
    kinds.shuffle(&mut rng);

    traces
        .into_iter()
        .zip(kinds)
        .enumerate()
        .map(|(i, (trace, kind))| {
            let id = trace.trace_id.clone();
            let base = random_labels(taxonomy, &mut rng);
            let level = ImpactLevel::ALL[rng.random_range(0..3)];
            let [a, b] = ANNOTATORS;
            let agree = |labels: &Labels, lvl| answered(&id, a, labels.clone(), lvl);
            let (records, expected) = match kind {
                ScriptKind::Agree => (
                    [agree(&base, level), answered(&id, b, base.clone(), level), answered(&id, ADJUDICATOR, base.clone(), level)],
                    Some(ExpectedGold { labels: base.clone(), impact_level: level, provenance: Provenance::Agreement }),
                ),
                ScriptKind::Skip { by } => {
                    let reason = SKIP_REASONS[i % SKIP_REASONS.len()];
                    let mut r = [agree(&base, level), answered(&id, b, base.clone(), level), answered(&id, ADJUDICATOR, base.clone(), level)];
                    r[by] = AnnotationRecord::skip(&id, ANNOTATORS[by], reason);
                    (r, None)
                }
                ScriptKind::LevelOnly => {
                    use ImpactLevel::*;
                    let triples = [
                        ([Minimum, Significant, Moderate], Moderate),
                        ([Moderate, Significant, Significant], Significant),
                        ([Minimum, Moderate, Minimum], Minimum),
                        ([Significant, Minimum, Minimum], Minimum),
                        ([Moderate, Minimum, Significant], Moderate),
                    ];
                    let (lv, median) = triples[rng.random_range(0..triples.len())];
                    (
                        [agree(&base, lv[0]), answered(&id, b, base.clone(), lv[1]), answered(&id, ADJUDICATOR, base.clone(), lv[2])],
                        Some(ExpectedGold { labels: base.clone(), impact_level: median, provenance: Provenance::Adjudicated }),
                    )
                }
                ScriptKind::SingleLabelMajority => {
                    let x = with_set(&base, REVERSIBILITY, &["instantly_reversible"]);
                    let y = with_set(&base, REVERSIBILITY, &["irreversible_without_external_actions"]);
                    (
                        [agree(&x, level), answered(&id, b, y, level), answered(&id, ADJUDICATOR, x.clone(), level)],
                        Some(ExpectedGold { labels: x, impact_level: level, provenance: Provenance::Adjudicated }),
                    )
                }
                ScriptKind::MultiLabelMajority => {
                    let both = with_set(&base, USER_INTENT, &["communication", "configuration"]);
                    let only_cfg = with_set(&base, USER_INTENT, &["configuration"]);
                    let only_comm = with_set(&base, USER_INTENT, &["communication"]);
                    (
                        [agree(&both, level), answered(&id, b, only_cfg, level), answered(&id, ADJUDICATOR, only_comm, level)],
                        Some(ExpectedGold { labels: both, impact_level: level, provenance: Provenance::Adjudicated }),
                    )
                }
                ScriptKind::ThreeWayTie => {
                    let x = with_set(&base, IDEMPOTENCY, &["repeating_has_same_effect"]);
                    let y = with_set(&base, IDEMPOTENCY, &["repeating_has_different_effect"]);
                    let z = with_set(&base, IDEMPOTENCY, &["repeating_does_not_have_effect"]);
                    (
                        [agree(&x, level), answered(&id, b, y, level), answered(&id, ADJUDICATOR, z.clone(), level)],
                        Some(ExpectedGold { labels: z, impact_level: level, provenance: Provenance::Adjudicated }),
                    )
                }
            };
            ScriptedTrace { trace, kind, records, expected }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub export: GoldExport,
    pub state: WorkflowState,
    /// Adjudications performed (each by the adjudicator id).
    pub adjudications: usize,
}

/// Drives `script` through a store persisted in `dir`. With `crash_after`,
/// the store is dropped after that many submissions, a torn line is appended
/// to the log, and the session resumes from a store reopened from disk.
pub fn simulate_annotation(
    dir: &Path,
    script: &[ScriptedTrace],
    taxonomy: Arc<Taxonomy>,
    crash_after: Option<usize>,
) -> Result<SimulationOutcome, AnnotationError> {
    let by_id: HashMap<&str, &ScriptedTrace> = script.iter().map(|s| (s.trace.trace_id.as_str(), s)).collect();
    let mut store = Store::open(dir, taxonomy.clone())?;
    store.add_traces(script.iter().map(|s| s.trace.clone()))?;
    for who in ANNOTATORS {
        store.register_annotator(who, Role::Annotator)?;
    }
    store.register_annotator(ADJUDICATOR, Role::Adjudicator)?;

    let mut submissions = 0usize;
    loop {
        let mut progressed = false;
        for (slot, who) in ANNOTATORS.iter().enumerate() {
            let Some(task) = store.next_task(who)? else { continue };
            let record = by_id[task.trace_id.as_str()].records[slot].clone();
            store.submit_annotation(record)?;
            progressed = true;
            submissions += 1;
            if crash_after == Some(submissions) {
                drop(store);
                use std::io::Write;
                let mut log = std::fs::OpenOptions::new().append(true).open(dir.join(EVENT_LOG_FILE))?;
                log.write_all(br#"{"event":"submitted","record":{"trace_id":"#)?;
                drop(log);
                store = Store::open(dir, taxonomy.clone())?;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut adjudications = 0;
    for pending in store.pending_adjudications() {
        store.submit_adjudication(by_id[pending.trace_id.as_str()].records[2].clone())?;
        adjudications += 1;
    }
    store.sync()?;
    Ok(SimulationOutcome { export: store.export_gold(None), state: store.snapshot(), adjudications })
}
