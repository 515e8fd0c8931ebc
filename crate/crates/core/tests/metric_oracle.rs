use std::collections::BTreeSet;
use std::time::Instant;

use impact_core::eval::{category_accuracy, EvalConfig, LabeledPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NONE: &str = "__none__";

/// Scores a pair by explicit enumeration of the option universe. An empty set
/// is replaced by a synthetic "none" option first.
fn brute_force_hit(p: &BTreeSet<String>, g: &BTreeSet<String>, universe: &[String], theta: f64) -> bool {
    let fill = |s: &BTreeSet<String>| -> Vec<String> {
        if s.is_empty() {
            vec![NONE.to_string()]
        } else {
            s.iter().cloned().collect()
        }
    };
    let (p, g) = (fill(p), fill(g));
    let mut inter = 0u32;
    let mut union = 0u32;
    for option in universe.iter().map(String::as_str).chain([NONE]) {
        let in_p = p.iter().any(|x| x == option);
        let in_g = g.iter().any(|x| x == option);
        if in_p && in_g {
            inter += 1;
        }
        if in_p || in_g {
            union += 1;
        }
    }
    // inter / union > theta, without division
    f64::from(inter) > theta * f64::from(union)
}

fn random_set(rng: &mut ChaCha8Rng, universe: &[String]) -> BTreeSet<String> {
    universe.iter().filter(|_| rng.random_bool(0.4)).cloned().collect()
}

#[test]
fn category_accuracy_equals_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let universe: Vec<String> = (0..6).map(|i| format!("opt{i}")).collect();
    let start = Instant::now();
    for theta in [0.0, 0.25, 0.5, 0.75] {
        let pairs: Vec<LabeledPair> = (0..1000)
            .map(|i| LabeledPair {
                item: i.to_string(),
                category_id: "c".into(),
                predicted: Some(random_set(&mut rng, &universe)),
                gold: random_set(&mut rng, &universe),
            })
            .collect();
        let hits = pairs
            .iter()
            .filter(|p| brute_force_hit(p.predicted.as_ref().unwrap(), &p.gold, &universe, theta))
            .count();
        let config = EvalConfig { theta, ..Default::default() };
        let acc = category_accuracy(&pairs, &config).unwrap();
        assert_eq!(acc.hits, hits, "theta {theta}");
        assert_eq!(acc.accuracy, hits as f64 / 1000.0);
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}
