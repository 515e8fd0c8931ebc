//! Threshold-based Jaccard accuracy, impact-level confusion matrices and
//! dataset distribution tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{redaction_for, Outcome, Redaction, DEFAULT_VALIDITY_FLOOR};
use crate::taxonomy::{default_taxonomy, ImpactLevel};
use crate::trace::{LevelHistogram, TraceSource};

/// Default similarity threshold; a pair scores only when S strictly exceeds it.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("threshold {0} is outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("no pairs to score for category `{0}`")]
    EmptyInput(String),
    #[error("pairs mix categories `{0}` and `{1}`")]
    MixedCategories(String, String),
    #[error("prediction for trace `{0}` has no gold record")]
    UnmatchedPrediction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidPolicy {
    /// Invalid predictions leave the denominator.
    #[default]
    Exclude,
    /// Invalid predictions count as misses.
    ScoreZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub theta: f64,
    #[serde(default)]
    pub invalid_policy: InvalidPolicy,
    /// Categories to score; the taxonomy's default evaluation set when empty.
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default = "default_floor")]
    pub validity_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_VALIDITY_FLOOR
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            theta: DEFAULT_THETA,
            invalid_policy: InvalidPolicy::Exclude,
            categories: default_taxonomy().evaluated_by_default(),
            validity_floor: DEFAULT_VALIDITY_FLOOR,
        }
    }
}

impl EvalConfig {
    pub fn with_theta(theta: f64) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(EvalError::ThresholdOutOfRange(theta));
        }
        Ok(EvalConfig { theta, ..Default::default() })
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(EvalError::ThresholdOutOfRange(self.theta));
        }
        Ok(())
    }
}

/// |P ∩ G| / |P ∪ G|, with two empty sets counting as full agreement.
pub fn jaccard<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> f64 {
    let union = predicted.union(gold).count();
    if union == 0 {
        return 1.0;
    }
    predicted.intersection(gold).count() as f64 / union as f64
}

/// 1 iff `similarity` strictly exceeds `theta`.
pub fn indicator(similarity: f64, theta: f64) -> u8 {
    u8::from(similarity > theta)
}

/// One scored item for one category. `predicted` is `None` when the model's
/// answer was unusable for this category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub item: String,
    pub category_id: String,
    pub predicted: Option<BTreeSet<String>>,
    pub gold: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category_id: String,
    /// Scored items.
    pub n: usize,
    pub hits: usize,
    pub accuracy: f64,
    /// Items whose prediction was unusable.
    pub invalid: usize,
    pub redaction: Redaction,
}

pub fn category_accuracy(pairs: &[LabeledPair], config: &EvalConfig) -> Result<CategoryAccuracy, EvalError> {
    config.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| EvalError::EmptyInput(config.categories.first().cloned().unwrap_or_default()))?;
    let category_id = first.category_id.clone();
    let mut n = 0;
    let mut hits = 0;
    let mut invalid = 0;
    for pair in pairs {
        if pair.category_id != category_id {
            return Err(EvalError::MixedCategories(category_id, pair.category_id.clone()));
        }
        match &pair.predicted {
            Some(p) => {
                n += 1;
                hits += usize::from(indicator(jaccard(p, &pair.gold), config.theta));
            }
            None => {
                invalid += 1;
                if config.invalid_policy == InvalidPolicy::ScoreZero {
                    n += 1;
                }
            }
        }
    }
    Ok(CategoryAccuracy {
        category_id,
        n,
        hits,
        accuracy: ratio(hits, n),
        invalid,
        redaction: redaction_for(pairs.len() - invalid, pairs.len(), config.validity_floor),
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// 3x3 counts, rows = gold level, columns = predicted level, plus a per-row
/// count of invalid predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub cells: [[usize; 3]; 3],
    pub invalid: [usize; 3],
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: ImpactLevel, predicted: Option<ImpactLevel>) {
        match predicted {
            Some(p) => self.cells[gold.index()][p.index()] += 1,
            None => self.invalid[gold.index()] += 1,
        }
    }

    pub fn remove(&mut self, gold: ImpactLevel, predicted: Option<ImpactLevel>) {
        match predicted {
            Some(p) => self.cells[gold.index()][p.index()] -= 1,
            None => self.invalid[gold.index()] -= 1,
        }
    }

    pub fn get(&self, gold: ImpactLevel, predicted: ImpactLevel) -> usize {
        self.cells[gold.index()][predicted.index()]
    }

    /// Sum of the 3x3 cells (valid predictions only).
    pub fn total(&self) -> usize {
        self.cells.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [usize; 3] {
        self.cells.map(|row| row.iter().sum())
    }

    pub fn diagonal(&self) -> usize {
        (0..3).map(|i| self.cells[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactAccuracy {
    pub n: usize,
    pub correct: usize,
    pub invalid: usize,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
}

/// Exact-match accuracy of predicted impact levels against gold levels.
pub fn impact_accuracy(
    outcomes: &[Outcome],
    golds: &HashMap<String, ImpactLevel>,
    policy: InvalidPolicy,
) -> Result<ImpactAccuracy, EvalError> {
    let mut matrix = ConfusionMatrix::default();
    for outcome in outcomes {
        let gold = golds
            .get(outcome.trace_id())
            .ok_or_else(|| EvalError::UnmatchedPrediction(outcome.trace_id().to_string()))?;
        matrix.add(*gold, outcome.impact_level());
    }
    Ok(impact_from_matrix(matrix, policy))
}

pub fn impact_from_matrix(matrix: ConfusionMatrix, policy: InvalidPolicy) -> ImpactAccuracy {
    let invalid: usize = matrix.invalid.iter().sum();
    let n = match policy {
        InvalidPolicy::Exclude => matrix.total(),
        InvalidPolicy::ScoreZero => matrix.total() + invalid,
    };
    let correct = matrix.diagonal();
    ImpactAccuracy {
        n,
        correct,
        invalid,
        accuracy: ratio(correct, n),
        matrix,
    }
}

/// Formats a ratio as a percentage with two decimals ("58.37").
pub fn percent(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}

/// One gold-labeled item as seen by the distribution table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcedLevel {
    pub source: TraceSource,
    pub impact_level: ImpactLevel,
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: TraceSource,
    pub n: usize,
    pub histogram: LevelHistogram,
    pub minimum_pct: f64,
    pub moderate_pct: f64,
    pub significant_pct: f64,
    pub at_least_moderate_pct: f64,
    pub skipped: usize,
    pub domains: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub rows: Vec<SourceRow>,
    pub warnings: Vec<String>,
}

impl DistributionReport {
    pub fn row(&self, source: TraceSource) -> Option<&SourceRow> {
        self.rows.iter().find(|r| r.source == source)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| source | n | minimum % | moderate % | significant % | at least moderate % | skipped |\n|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
                r.source.as_str(),
                r.n,
                r.minimum_pct,
                r.moderate_pct,
                r.significant_pct,
                r.at_least_moderate_pct,
                r.skipped
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("\nwarning: {w}"));
        }
        out
    }
}

/// Per-source impact-level percentages and domain counts; skips are reported
/// separately and never enter the percentages.
pub fn distribution_report(items: &[SourcedLevel], skipped: &BTreeMap<TraceSource, usize>) -> DistributionReport {
    let mut by_source: BTreeMap<TraceSource, (LevelHistogram, BTreeMap<String, usize>)> = BTreeMap::new();
    for item in items {
        let entry = by_source.entry(item.source).or_default();
        entry.0.add(item.impact_level);
        if let Some(d) = &item.domain {
            *entry.1.entry(d.clone()).or_insert(0) += 1;
        }
    }
    let mut warnings = Vec::new();
    for (source, count) in skipped {
        if !by_source.contains_key(source) {
            warnings.push(format!(
                "source `{}` has no gold-labeled items ({count} skipped); row omitted",
                source.as_str()
            ));
        }
    }
    let rows = by_source
        .into_iter()
        .map(|(source, (histogram, domains))| {
            let n = histogram.total();
            let pct = |k: usize| 100.0 * ratio(k, n);
            SourceRow {
                source,
                n,
                minimum_pct: pct(histogram.minimum),
                moderate_pct: pct(histogram.moderate),
                significant_pct: pct(histogram.significant),
                at_least_moderate_pct: pct(histogram.moderate + histogram.significant),
                skipped: skipped.get(&source).copied().unwrap_or(0),
                histogram,
                domains,
            }
        })
        .collect();
    DistributionReport { rows, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{InvalidReason, ParseFailure, ParsedResponse, RequestKey};
    use crate::prompt::Strategy;
    use crate::taxonomy::{default_taxonomy, Labels};
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&set(&["a", "b"]), &set(&["a"])), 0.5);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 1.0);
        assert_eq!(jaccard(&set(&["a"]), &set(&[])), 0.0);
    }

    #[test]
    fn indicator_is_strict() {
        assert_eq!(indicator(0.6, 0.5), 1);
        assert_eq!(indicator(0.5, 0.5), 0);
        assert_eq!(indicator(1.0, 0.5), 1);
        assert_eq!(indicator(0.0, 0.0), 0);
    }

    fn pair(p: Option<&[&str]>, g: &[&str]) -> LabeledPair {
        LabeledPair {
            item: "i".into(),
            category_id: "user_intent".into(),
            predicted: p.map(set),
            gold: set(g),
        }
    }

    #[test]
    fn category_accuracy_examples() {
        let cfg = EvalConfig::default();
        // S = 1, 1, 0.5, 0
        let pairs = vec![
            pair(Some(&["a"]), &["a"]),
            pair(Some(&[]), &[]),
            pair(Some(&["a", "b"]), &["a"]),
            pair(Some(&["c"]), &["a"]),
        ];
        let acc = category_accuracy(&pairs, &cfg).unwrap();
        assert_eq!((acc.hits, acc.n, acc.accuracy), (2, 4, 0.5));

        let exact = vec![pair(Some(&["a"]), &["a"]); 7];
        assert_eq!(category_accuracy(&exact, &cfg).unwrap().accuracy, 1.0);

        let single: Vec<LabeledPair> = ["x", "x", "x", "y", "z"]
            .iter()
            .map(|p| pair(Some(&[p]), &["x"]))
            .collect();
        assert_eq!(category_accuracy(&single, &cfg).unwrap().accuracy, 0.6);
        assert!(matches!(category_accuracy(&[], &cfg), Err(EvalError::EmptyInput(_))));
    }

    #[test]
    fn invalid_policies() {
        let pairs = vec![pair(Some(&["a"]), &["a"]), pair(None, &["a"]), pair(Some(&["a"]), &["a"])];
        let ex = category_accuracy(&pairs, &EvalConfig::default()).unwrap();
        assert_eq!((ex.n, ex.hits, ex.invalid), (2, 2, 1));
        assert_eq!(ex.redaction, Redaction::Reported);
        let zero = EvalConfig { invalid_policy: InvalidPolicy::ScoreZero, ..Default::default() };
        let sz = category_accuracy(&pairs, &zero).unwrap();
        assert_eq!((sz.n, sz.hits), (3, 2));
        let mostly_bad = vec![pair(None, &["a"]), pair(None, &["a"]), pair(Some(&["a"]), &["a"])];
        assert_eq!(category_accuracy(&mostly_bad, &EvalConfig::default()).unwrap().redaction, Redaction::Redacted);
    }

    #[test]
    fn theta_range() {
        assert!(EvalConfig::with_theta(1.2).is_err());
        assert!(EvalConfig::with_theta(-0.1).is_err());
        assert_eq!(EvalConfig::default().categories.len(), 8);
    }

    fn level_outcome(trace: &str, level: Option<ImpactLevel>) -> Outcome {
        let key = RequestKey { trace_id: trace, strategy: Strategy::ZeroShot, backend: "b" };
        match level {
            Some(l) => key.outcome(
                "",
                Ok(ParsedResponse { impact_level: Some(l), labels: Labels::new(), reasoning_text: None }),
            ),
            None => key.outcome(
                "",
                Err(ParseFailure { reason: InvalidReason::Unparseable, field: None, detail: String::new() }),
            ),
        }
    }

    #[test]
    fn impact_accuracy_examples() {
        use ImpactLevel::*;
        let golds: HashMap<String, ImpactLevel> =
            [("a", Minimum), ("b", Moderate), ("c", Significant)].map(|(k, v)| (k.to_string(), v)).into();
        let outs = vec![
            level_outcome("a", Some(Minimum)),
            level_outcome("b", Some(Moderate)),
            level_outcome("c", Some(Significant)),
        ];
        let acc = impact_accuracy(&outs, &golds, InvalidPolicy::Exclude).unwrap();
        assert_eq!(acc.accuracy, 1.0);
        assert_eq!(acc.matrix.cells, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);

        let golds: HashMap<String, ImpactLevel> = [("a", Moderate), ("b", Moderate)].map(|(k, v)| (k.to_string(), v)).into();
        let outs = vec![level_outcome("a", Some(Significant)), level_outcome("b", Some(Significant))];
        let acc = impact_accuracy(&outs, &golds, InvalidPolicy::Exclude).unwrap();
        assert_eq!(acc.accuracy, 0.0);
        assert_eq!(acc.matrix.get(Moderate, Significant), 2);

        let outs = vec![level_outcome("zz", Some(Minimum))];
        assert_eq!(
            impact_accuracy(&outs, &golds, InvalidPolicy::Exclude).unwrap_err(),
            EvalError::UnmatchedPrediction("zz".into())
        );

        let outs = vec![level_outcome("a", Some(Moderate)), level_outcome("b", None)];
        let ex = impact_accuracy(&outs, &golds, InvalidPolicy::Exclude).unwrap();
        assert_eq!((ex.n, ex.correct, ex.invalid), (1, 1, 1));
        assert_eq!(ex.matrix.invalid[Moderate.index()], 1);
        let sz = impact_accuracy(&outs, &golds, InvalidPolicy::ScoreZero).unwrap();
        assert_eq!((sz.n, sz.accuracy), (2, 0.5));
    }

    #[test]
    fn engineered_best_cell() {
        // 209 items, 122 correct
        let mut m = ConfusionMatrix::default();
        use ImpactLevel::*;
        for (g, p, k) in [
            (Minimum, Minimum, 30),
            (Minimum, Moderate, 20),
            (Minimum, Significant, 6),
            (Moderate, Minimum, 10),
            (Moderate, Moderate, 62),
            (Moderate, Significant, 31),
            (Significant, Moderate, 20),
            (Significant, Significant, 30),
        ] {
            for _ in 0..k {
                m.add(g, Some(p));
            }
        }
        let acc = impact_from_matrix(m, InvalidPolicy::Exclude);
        assert_eq!(acc.n, 209);
        assert_eq!(percent(acc.accuracy), "58.37");
    }

    #[test]
    fn distribution_examples() {
        let all_min: Vec<SourcedLevel> = (0..10)
            .map(|_| SourcedLevel { source: TraceSource::Motif, impact_level: ImpactLevel::Minimum, domain: None })
            .collect();
        let r = distribution_report(&all_min, &BTreeMap::new());
        let row = r.row(TraceSource::Motif).unwrap();
        assert_eq!((row.minimum_pct, row.moderate_pct, row.significant_pct), (100.0, 0.0, 0.0));

        let mut items = Vec::new();
        for (source, n, at_least) in [(TraceSource::Androidcontrol, 744, 58), (TraceSource::Motif, 484, 9)] {
            for i in 0..n {
                let level = if i < at_least { ImpactLevel::Moderate } else { ImpactLevel::Minimum };
                items.push(SourcedLevel { source, impact_level: level, domain: Some("browsing".into()) });
            }
        }
        let skipped = BTreeMap::from([(TraceSource::Synthesized, 41)]);
        let r = distribution_report(&items, &skipped);
        assert_eq!(format!("{:.2}", r.row(TraceSource::Androidcontrol).unwrap().at_least_moderate_pct), "7.80");
        assert_eq!(format!("{:.2}", r.row(TraceSource::Motif).unwrap().at_least_moderate_pct), "1.86");
        assert!(r.row(TraceSource::Synthesized).is_none());
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.row(TraceSource::Motif).unwrap().domains["browsing"], 484);
    }

    fn arb_set() -> impl proptest::strategy::Strategy<Value = BTreeSet<u8>> {
        prop::collection::btree_set(0u8..6, 0..=6)
    }

    proptest! {
        #[test]
        fn jaccard_symmetric_bounded(a in arb_set(), b in arb_set()) {
            let s = jaccard(&a, &b);
            prop_assert_eq!(s, jaccard(&b, &a));
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, a == b);
        }

        #[test]
        fn raising_theta_never_helps(
            pairs in prop::collection::vec((arb_set(), arb_set()), 1..40),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let to_pairs: Vec<LabeledPair> = pairs.iter().map(|(p, g)| LabeledPair {
                item: String::new(),
                category_id: "c".into(),
                predicted: Some(p.iter().map(|x| x.to_string()).collect()),
                gold: g.iter().map(|x| x.to_string()).collect(),
            }).collect();
            let a_lo = category_accuracy(&to_pairs, &EvalConfig { theta: lo, ..Default::default() }).unwrap();
            let a_hi = category_accuracy(&to_pairs, &EvalConfig { theta: hi, ..Default::default() }).unwrap();
            prop_assert!(a_hi.accuracy <= a_lo.accuracy);
        }

        #[test]
        fn matrix_remove_decrements_one_cell(items in prop::collection::vec((0usize..3, proptest::option::of(0usize..3)), 1..50), pick in any::<prop::sample::Index>()) {
            let mut m = ConfusionMatrix::default();
            for (g, p) in &items {
                m.add(ImpactLevel::ALL[*g], p.map(|p| ImpactLevel::ALL[p]));
            }
            let scored = items.iter().filter(|(_, p)| p.is_some()).count();
            prop_assert_eq!(m.total(), scored);
            let (g, p) = items[pick.index(items.len())];
            let before = m;
            m.remove(ImpactLevel::ALL[g], p.map(|p| ImpactLevel::ALL[p]));
            let changed = before.cells.iter().flatten().zip(m.cells.iter().flatten()).filter(|(a, b)| a != b).count()
                + before.invalid.iter().zip(m.invalid.iter()).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, 1);
        }
    }

    #[test]
    fn single_label_threshold_is_exact_match() {
        for c in default_taxonomy().categories.iter().filter(|c| !c.multi_label) {
            for a in &c.options {
                for b in &c.options {
                    let s = jaccard(&set(&[&a.id]), &set(&[&b.id]));
                    assert_eq!(indicator(s, DEFAULT_THETA) == 1, a.id == b.id);
                }
            }
        }
    }
}
