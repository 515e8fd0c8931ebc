//! Multi-screen UI action traces: ingestion, HTML rendering for text-only
//! backends, consecutive-screen deduplication and corpus statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::ImpactLevel;

/// Default similarity at or above which a screen is folded into its run head.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.95;

/// Grid size used to bucket element bounds when fingerprinting screens.
pub const BOUNDS_BUCKET_PX: u32 = 16;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace document could not be parsed: {0}")]
    Parse(String),
    #[error("trace `{0}` has no screens")]
    EmptyTrace(String),
    #[error("trace `{0}` has an empty action description")]
    EmptyDescription(String),
    #[error("trace `{trace}`, screen {screen}: element `{element}` lies outside the {width}x{height} screen or has zero size")]
    BoundsOutOfRange {
        trace: String,
        screen: usize,
        element: String,
        width: u32,
        height: u32,
    },
    #[error("gold record references unknown trace `{0}`")]
    DanglingGoldReference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Button,
    Text,
    Input,
    Image,
    Checkbox,
    Toggle,
    Icon,
    Container,
    #[serde(other)]
    Other,
}

impl ElementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Button => "button",
            ElementKind::Text => "text",
            ElementKind::Input => "input",
            ElementKind::Image => "image",
            ElementKind::Checkbox => "checkbox",
            ElementKind::Toggle => "toggle",
            ElementKind::Icon => "icon",
            ElementKind::Container => "container",
            ElementKind::Other => "other",
        }
    }
}

/// Pixel rectangle `[x, y, width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Bounds {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl From<[u32; 4]> for Bounds {
    fn from([x, y, width, height]: [u32; 4]) -> Self {
        Bounds { x, y, width, height }
    }
}

impl From<Bounds> for [u32; 4] {
    fn from(b: Bounds) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

impl Bounds {
    fn fits(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && u64::from(self.x) + u64::from(self.width) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.height) <= u64::from(height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiElement {
    pub id: String,
    pub kind: ElementKind,
    #[serde(default)]
    pub text: String,
    pub bounds: Bounds,
    #[serde(default)]
    pub clickable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screen {
    pub index: usize,
    /// Screenshot path, relative to the corpus file. Never embedded.
    pub image: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub elements: Vec<UiElement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Synthesized,
    Motif,
    Androidcontrol,
    #[serde(other)]
    Other,
}

impl TraceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceSource::Synthesized => "synthesized",
            TraceSource::Motif => "motif",
            TraceSource::Androidcontrol => "androidcontrol",
            TraceSource::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub app_name: String,
    pub action_description: String,
    pub source: TraceSource,
    /// Task domain such as "e-commerce"; optional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub screens: Vec<Screen>,
}

impl Trace {
    pub fn screen_count(&self) -> usize {
        self.screens.len()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    /// Checks invariants and renumbers screens to `0..n` in their stored order.
    ///
    /// Documents may carry sparse or unordered indices; screens are sorted by
    /// their declared index first (stable), then renumbered.
    pub fn normalize(mut self) -> Result<Trace, TraceError> {
        if self.screens.is_empty() {
            return Err(TraceError::EmptyTrace(self.trace_id));
        }
        if self.action_description.trim().is_empty() {
            return Err(TraceError::EmptyDescription(self.trace_id));
        }
        self.screens.sort_by_key(|s| s.index);
        for (i, screen) in self.screens.iter_mut().enumerate() {
            screen.index = i;
            if let Some(bad) = screen
                .elements
                .iter()
                .find(|e| !e.bounds.fits(screen.width, screen.height))
            {
                return Err(TraceError::BoundsOutOfRange {
                    trace: self.trace_id.clone(),
                    screen: i,
                    element: bad.id.clone(),
                    width: screen.width,
                    height: screen.height,
                });
            }
        }
        Ok(self)
    }
}

/// Parses one trace document (one corpus line) and validates it.
pub fn ingest_trace(document: &str) -> Result<Trace, TraceError> {
    let trace: Trace =
        serde_json::from_str(document).map_err(|e| TraceError::Parse(e.to_string()))?;
    trace.normalize()
}

/// Error for one line of a JSON Lines corpus.
#[derive(Debug)]
pub struct LineError {
    pub line: usize,
    pub error: TraceError,
}

/// Parses a JSON Lines corpus, collecting every failing line. Blank lines are skipped.
pub fn ingest_corpus(text: &str) -> (Vec<Trace>, Vec<LineError>) {
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match ingest_trace(line) {
            Ok(t) => traces.push(t),
            Err(error) => errors.push(LineError { line: i + 1, error }),
        }
    }
    (traces, errors)
}

fn escape_html(text: &str, out: &mut String) {
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            '\n' => out.push(' '),
            c => out.push(c),
        }
    }
}

/// Renders a screen's elements as an HTML string for text-only backends.
///
/// Elements appear in list order, one per line. Buttons and inputs keep their
/// own tags; every other kind becomes a `div` with a `kind` attribute.
pub fn serialize_screen_html(screen: &Screen) -> String {
    if screen.elements.is_empty() {
        return "<body></body>".to_string();
    }
    let mut out = String::from("<body>\n");
    for e in &screen.elements {
        let b = e.bounds;
        let mut attrs = String::new();
        attrs.push_str(" id=\"");
        escape_html(&e.id, &mut attrs);
        attrs.push('"');
        match e.kind {
            ElementKind::Button | ElementKind::Input => {}
            kind => {
                let _ = write!(attrs, " kind=\"{}\"", kind.as_str());
            }
        }
        let _ = write!(
            attrs,
            " bounds=\"{},{},{},{}\" clickable=\"{}\"",
            b.x, b.y, b.width, b.height, e.clickable
        );
        match e.kind {
            ElementKind::Button => {
                out.push_str("<button");
                out.push_str(&attrs);
                out.push('>');
                escape_html(&e.text, &mut out);
                out.push_str("</button>\n");
            }
            ElementKind::Input => {
                out.push_str("<input");
                out.push_str(&attrs);
                out.push_str(" value=\"");
                escape_html(&e.text, &mut out);
                out.push_str("\">\n");
            }
            _ => {
                out.push_str("<div");
                out.push_str(&attrs);
                out.push('>');
                escape_html(&e.text, &mut out);
                out.push_str("</div>\n");
            }
        }
    }
    out.push_str("</body>");
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Fingerprint {
    kind: ElementKind,
    text: String,
    cell: [u32; 4],
}

fn fingerprints(screen: &Screen) -> HashMap<Fingerprint, usize> {
    let mut counts = HashMap::new();
    for e in &screen.elements {
        let b = e.bounds;
        let fp = Fingerprint {
            kind: e.kind,
            text: e.text.clone(),
            cell: [b.x, b.y, b.width, b.height].map(|v| v / BOUNDS_BUCKET_PX),
        };
        *counts.entry(fp).or_insert(0) += 1;
    }
    counts
}

/// Multiset Jaccard similarity of two screens' element fingerprints.
///
/// A fingerprint is (kind, text, bounds bucketed to a 16 px grid). Two screens
/// without elements are identical.
pub fn screen_similarity(a: &Screen, b: &Screen) -> f64 {
    let fa = fingerprints(a);
    let fb = fingerprints(b);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (fp, &ca) in &fa {
        let cb = fb.get(fp).copied().unwrap_or(0);
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    for (fp, &cb) in &fb {
        if !fa.contains_key(fp) {
            union += cb;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Keeps only the head of each run of consecutive near-identical screens.
///
/// A screen joins the current run when its similarity to the run head is at
/// least `threshold`. Retained screens are renumbered from 0.
pub fn dedup_consecutive(trace: &Trace, threshold: f64) -> Trace {
    let threshold = threshold.clamp(0.0, 1.0);
    let mut kept: Vec<Screen> = Vec::with_capacity(trace.screens.len());
    for screen in &trace.screens {
        let joins_run = kept
            .last()
            .is_some_and(|head| screen_similarity(head, screen) >= threshold);
        if !joins_run {
            kept.push(screen.clone());
        }
    }
    for (i, s) in kept.iter_mut().enumerate() {
        s.index = i;
    }
    Trace {
        screens: kept,
        ..trace.clone()
    }
}

/// Impact-level counts in severity order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelHistogram {
    pub minimum: usize,
    pub moderate: usize,
    pub significant: usize,
}

impl LevelHistogram {
    pub fn add(&mut self, level: ImpactLevel) {
        match level {
            ImpactLevel::Minimum => self.minimum += 1,
            ImpactLevel::Moderate => self.moderate += 1,
            ImpactLevel::Significant => self.significant += 1,
        }
    }

    pub fn get(&self, level: ImpactLevel) -> usize {
        match level {
            ImpactLevel::Minimum => self.minimum,
            ImpactLevel::Moderate => self.moderate,
            ImpactLevel::Significant => self.significant,
        }
    }

    pub fn total(&self) -> usize {
        self.minimum + self.moderate + self.significant
    }

    pub fn merge(&mut self, other: &LevelHistogram) {
        self.minimum += other.minimum;
        self.moderate += other.moderate;
        self.significant += other.significant;
    }
}

/// A gold label reduced to what corpus statistics need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldLevel<'a> {
    pub trace_id: &'a str,
    pub impact_level: ImpactLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub trace_count: usize,
    pub screen_count: usize,
    /// `screen_count / trace_count`; 0 for an empty corpus.
    pub mean_screens_per_trace: f64,
    pub impact_level_histogram: LevelHistogram,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub task_domain_histogram: BTreeMap<String, usize>,
}

impl CorpusStats {
    /// Combines stats computed over disjoint corpora.
    pub fn merge(&self, other: &CorpusStats) -> CorpusStats {
        let trace_count = self.trace_count + other.trace_count;
        let screen_count = self.screen_count + other.screen_count;
        let mut hist = self.impact_level_histogram;
        hist.merge(&other.impact_level_histogram);
        let mut domains = self.task_domain_histogram.clone();
        for (k, v) in &other.task_domain_histogram {
            *domains.entry(k.clone()).or_insert(0) += v;
        }
        CorpusStats {
            trace_count,
            screen_count,
            mean_screens_per_trace: mean(screen_count, trace_count),
            impact_level_histogram: hist,
            task_domain_histogram: domains,
        }
    }
}

fn mean(screens: usize, traces: usize) -> f64 {
    if traces == 0 {
        0.0
    } else {
        screens as f64 / traces as f64
    }
}

/// Counts traces and screens; the impact histogram covers only gold-labeled
/// traces (skipped traces never have gold records).
pub fn corpus_stats(traces: &[Trace], golds: &[GoldLevel<'_>]) -> Result<CorpusStats, TraceError> {
    let ids: HashSet<&str> = traces.iter().map(|t| t.trace_id.as_str()).collect();
    let mut hist = LevelHistogram::default();
    for g in golds {
        if !ids.contains(g.trace_id) {
            return Err(TraceError::DanglingGoldReference(g.trace_id.to_string()));
        }
        hist.add(g.impact_level);
    }
    let screen_count = traces.iter().map(Trace::screen_count).sum();
    let mut domains = BTreeMap::new();
    for t in traces {
        if let Some(d) = &t.domain {
            *domains.entry(d.clone()).or_insert(0) += 1;
        }
    }
    Ok(CorpusStats {
        trace_count: traces.len(),
        screen_count,
        mean_screens_per_trace: mean(screen_count, traces.len()),
        impact_level_histogram: hist,
        task_domain_histogram: domains,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ingest_renumbers_sparse_indices() {
        let doc = r#"{"trace_id":"t1","app_name":"Mail","action_description":"Send it","source":"synthesized",
            "screens":[{"index":0,"image":"a.png","width":100,"height":100,"elements":[]},
                       {"index":2,"image":"b.png","width":100,"height":100,"elements":[]},
                       {"index":5,"image":"c.png","width":100,"height":100,"elements":[]}]}"#;
        let t = ingest_trace(doc).unwrap();
        let idx: Vec<usize> = t.screens.iter().map(|s| s.index).collect();
        let imgs: Vec<&str> = t.screens.iter().map(|s| s.image.as_str()).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(imgs, vec!["a.png", "b.png", "c.png"]);
    }

    #[test]
    fn ingest_errors() {
        let empty = r#"{"trace_id":"t1","app_name":"Mail","action_description":"Send","source":"motif","screens":[]}"#;
        assert!(matches!(ingest_trace(empty), Err(TraceError::EmptyTrace(_))));
        let oob = r#"{"trace_id":"t1","app_name":"Mail","action_description":"Send","source":"motif",
            "screens":[{"index":0,"image":"a.png","width":100,"height":100,
              "elements":[{"id":"e","kind":"button","text":"x","bounds":[90,0,20,10],"clickable":true}]}]}"#;
        assert!(matches!(ingest_trace(oob), Err(TraceError::BoundsOutOfRange { .. })));
        let zero = oob.replace("[90,0,20,10]", "[0,0,0,10]");
        assert!(matches!(ingest_trace(&zero), Err(TraceError::BoundsOutOfRange { .. })));
        assert!(matches!(ingest_trace("{"), Err(TraceError::Parse(_))));
        let unknown_source = empty.replace("\"motif\",\"screens\":[]", "\"web\",\"screens\":[{\"index\":0,\"image\":\"a\",\"width\":1,\"height\":1}]");
        assert_eq!(ingest_trace(&unknown_source).unwrap().source, TraceSource::Other);
    }

    #[test]
    fn corpus_reports_line_numbers() {
        let good = trace("t1", vec![screen(0, vec![])]).to_json_line();
        let text = format!("{good}\nnot json\n\n{good}\n");
        let (traces, errors) = ingest_corpus(&text);
        assert_eq!(traces.len(), 2);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line, 2);
    }

    #[test]
    fn html_single_button() {
        let s = screen(0, vec![element("ok", ElementKind::Button, "Confirm", [10, 20, 300, 80], true)]);
        let html = serialize_screen_html(&s);
        assert_eq!(
            html,
            "<body>\n<button id=\"ok\" bounds=\"10,20,300,80\" clickable=\"true\">Confirm</button>\n</body>"
        );
        assert_eq!(html.matches("<button").count(), 1);
    }

    #[test]
    fn html_empty_and_order() {
        assert_eq!(serialize_screen_html(&screen(0, vec![])), "<body></body>");
        let s = screen(
            0,
            vec![
                element("low", ElementKind::Text, "Bottom", [0, 2000, 100, 50], false),
                element("high", ElementKind::Input, "Search", [0, 0, 100, 50], true),
            ],
        );
        let html = serialize_screen_html(&s);
        assert!(html.find("Bottom").unwrap() < html.find("Search").unwrap());
        assert!(html.contains("<div id=\"low\" kind=\"text\" bounds=\"0,2000,100,50\" clickable=\"false\">Bottom</div>"));
        assert!(html.contains("<input id=\"high\" bounds=\"0,0,100,50\" clickable=\"true\" value=\"Search\">"));
    }

    #[test]
    fn html_escapes_text() {
        let s = screen(0, vec![element("a", ElementKind::Text, "<b>\"Tom & Jerry\"</b>", [0, 0, 1, 1], false)]);
        assert!(serialize_screen_html(&s).contains("&lt;b&gt;&quot;Tom &amp; Jerry&quot;&lt;/b&gt;"));
    }

    fn screen_with(n: usize, tag: &str) -> Screen {
        screen(
            0,
            (0..n)
                .map(|i| element(&format!("{tag}{i}"), ElementKind::Text, &format!("{tag} row {i}"), [0, 40 * i as u32, 500, 32], false))
                .collect(),
        )
    }

    #[test]
    fn dedup_identical_pair() {
        let a = screen_with(5, "a");
        let b = screen_with(5, "b");
        let t = trace("t", vec![a.clone(), a.clone(), b]);
        let out = dedup_consecutive(&t, 0.95);
        assert_eq!(out.screens.len(), 2);
        assert_eq!(out.screens[0].elements, a.elements);
        assert_eq!(out.screens[1].index, 1);
    }

    #[test]
    fn dedup_threshold_one_keeps_near_duplicates() {
        let a = screen_with(50, "a");
        let mut near = a.clone();
        near.elements.pop();
        assert!((screen_similarity(&a, &near) - 0.98).abs() < 1e-12);
        let t = trace("t", vec![a.clone(), near.clone()]);
        assert_eq!(dedup_consecutive(&t, 1.0).screens.len(), 2);
        assert_eq!(dedup_consecutive(&t, 0.98).screens.len(), 1);
    }

    #[test]
    fn dedup_ten_screens_four_near_duplicates() {
        // Heads A..F; A gets two near-copies, C and E one each.
        let heads: Vec<Screen> = ["a", "b", "c", "d", "e", "f"].iter().map(|t| screen_with(50, t)).collect();
        let near = |s: &Screen| {
            let mut n = s.clone();
            n.elements.pop();
            n
        };
        let screens = vec![
            heads[0].clone(),
            near(&heads[0]),
            near(&heads[0]),
            heads[1].clone(),
            heads[2].clone(),
            near(&heads[2]),
            heads[3].clone(),
            heads[4].clone(),
            near(&heads[4]),
            heads[5].clone(),
        ];
        let out = dedup_consecutive(&trace("t", screens), DEFAULT_DEDUP_THRESHOLD);
        assert_eq!(out.screens.len(), 6);
        for (kept, head) in out.screens.iter().zip(&heads) {
            assert_eq!(kept.elements, head.elements);
        }
    }

    #[test]
    fn bucketing_absorbs_small_shifts() {
        let a = screen(0, vec![element("x", ElementKind::Button, "Pay", [32, 32, 64, 32], true)]);
        let b = screen(0, vec![element("x", ElementKind::Button, "Pay", [40, 36, 70, 40], true)]);
        assert_eq!(screen_similarity(&a, &b), 1.0);
        let c = screen(0, vec![element("x", ElementKind::Button, "Pay", [64, 32, 64, 32], true)]);
        assert_eq!(screen_similarity(&a, &c), 0.0);
    }

    #[test]
    fn stats_mean_and_histogram() {
        let t = |id: &str, n: usize| trace(id, (0..n).map(|i| screen(i, vec![])).collect());
        let traces = vec![t("a", 4), t("b", 6), t("c", 6)];
        let stats = corpus_stats(&traces, &[]).unwrap();
        assert_eq!(stats.screen_count, 16);
        assert_eq!(stats.mean_screens_per_trace, 16.0 / 3.0);
        assert_eq!(stats.impact_level_histogram, LevelHistogram::default());
        let dangling = [GoldLevel { trace_id: "zzz", impact_level: ImpactLevel::Moderate }];
        assert!(matches!(corpus_stats(&traces, &dangling), Err(TraceError::DanglingGoldReference(_))));
    }

    #[test]
    fn stats_engineered_ratios() {
        let traces: Vec<Trace> = (0..209).map(|i| trace(&format!("t{i}"), vec![screen(0, vec![])])).collect();
        let ids: Vec<String> = traces.iter().map(|t| t.trace_id.clone()).collect();
        let golds: Vec<GoldLevel> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| GoldLevel {
                trace_id: id,
                impact_level: if i < 56 {
                    ImpactLevel::Minimum
                } else if i < 159 {
                    ImpactLevel::Moderate
                } else {
                    ImpactLevel::Significant
                },
            })
            .collect();
        let h = corpus_stats(&traces, &golds).unwrap().impact_level_histogram;
        let pct = |n: usize| format!("{:.1}", 100.0 * n as f64 / h.total() as f64);
        assert_eq!((pct(h.minimum), pct(h.moderate), pct(h.significant)), ("26.8".into(), "49.3".into(), "23.9".into()));
    }

    #[test]
    fn stats_merge_is_summation() {
        let t = |id: &str, n: usize| trace(id, (0..n).map(|i| screen(i, vec![])).collect());
        let all = vec![t("a", 4), t("b", 6), t("c", 7)];
        let whole = corpus_stats(&all, &[]).unwrap();
        let merged = corpus_stats(&all[..1], &[]).unwrap().merge(&corpus_stats(&all[1..], &[]).unwrap());
        assert_eq!(whole, merged);
    }

    fn arb_screen() -> impl Strategy<Value = Screen> {
        prop::collection::vec((0u8..3, 0u32..4), 0..5).prop_map(|els| {
            screen(
                0,
                els.into_iter()
                    .enumerate()
                    .map(|(i, (text, row))| element(&format!("e{i}"), ElementKind::Text, &format!("t{text}"), [0, row * 40, 100, 30], false))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn dedup_idempotent_and_order_preserving(screens in prop::collection::vec(arb_screen(), 1..8), threshold in 0.0f64..=1.0) {
            let t = trace("p", screens.into_iter().enumerate().map(|(i, mut s)| { s.index = i; s }).collect());
            let once = dedup_consecutive(&t, threshold);
            let twice = dedup_consecutive(&once, threshold);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.screens.len() <= t.screens.len());
            prop_assert_eq!(&once.screens[0].elements, &t.screens[0].elements);
            // retained screens form a subsequence of the input
            let mut it = t.screens.iter();
            for kept in &once.screens {
                prop_assert!(it.any(|s| s.elements == kept.elements));
            }
        }

        #[test]
        fn html_is_pure(s in arb_screen()) {
            prop_assert_eq!(serialize_screen_html(&s), serialize_screen_html(&s.clone()));
        }
    }
}
