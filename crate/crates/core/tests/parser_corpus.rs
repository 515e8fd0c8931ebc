use std::panic;

use impact_core::gateway::{parse_response, InvalidReason};
use impact_core::prompt::Strategy;
use impact_core::taxonomy::{default_taxonomy, ImpactLevel, LabelSet};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    id: usize,
    strategy: Strategy,
    raw_response: String,
    expected: String,
    reason: Option<InvalidReason>,
    impact_level: Option<ImpactLevel>,
}

fn corpus() -> Vec<Case> {
    include_str!("../../../fixtures/parser/malformed_responses.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn malformed_corpus_split_and_reasons() {
    let cases = corpus();
    assert_eq!(cases.len(), 50);
    let mut predictions = 0;
    for case in &cases {
        let result = panic::catch_unwind(|| parse_response(&case.raw_response, case.strategy, default_taxonomy()))
            .unwrap_or_else(|_| panic!("case {} panicked", case.id));
        match (case.expected.as_str(), result) {
            ("prediction", Ok(p)) => {
                predictions += 1;
                assert_eq!(p.impact_level, case.impact_level, "case {}", case.id);
            }
            ("invalid", Err(f)) => assert_eq!(Some(f.reason), case.reason, "case {}: {}", case.id, f.detail),
            (expected, got) => panic!("case {}: expected {expected}, got {got:?}", case.id),
        }
    }
    assert_eq!(predictions, 26);
}

#[test]
fn label_details_of_selected_cases() {
    let cases = corpus();
    let parse = |id: usize| {
        let c = &cases[id - 1];
        parse_response(&c.raw_response, c.strategy, default_taxonomy()).unwrap()
    };
    assert_eq!(parse(21).labels["impact_on_others"], LabelSet::empty());
    assert!(parse(22).labels["impact_on_ui"].is_empty());
    let timely = &parse(23).labels["reversibility"];
    assert!(timely.time_bound && timely.options.contains("multiple_steps_required"));
    let tx = &parse(24).labels["user_intent"];
    assert!(tx.options.contains("executing_transactions") && tx.sub_options.contains("monetary"));
    assert_eq!(parse(38).labels["user_intent"], LabelSet::of(["communication", "configuration"]));
    assert_eq!(parse(17).labels["reversibility"], LabelSet::of(["instantly_reversible"]));
    assert!(parse(4).labels.is_empty(), "zero-shot answers carry no categories");
}
