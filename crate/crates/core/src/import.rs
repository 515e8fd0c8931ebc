//! Corpus adapters: the native trace format plus two view-hierarchy layouts
//! modeled on public UI navigation datasets.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use crate::trace::{ingest_trace, Bounds, ElementKind, LineError, Screen, Trace, TraceError, TraceSource, UiElement};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapter {
    Native,
    MotifLike,
    AndroidcontrolLike,
}

impl Adapter {
    pub fn as_str(self) -> &'static str {
        match self {
            Adapter::Native => "native",
            Adapter::MotifLike => "motif_like",
            Adapter::AndroidcontrolLike => "androidcontrol_like",
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Adapter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "native" => Ok(Adapter::Native),
            "motif_like" => Ok(Adapter::MotifLike),
            "androidcontrol_like" => Ok(Adapter::AndroidcontrolLike),
            other => Err(format!("unknown adapter `{other}` (native, motif_like, androidcontrol_like)")),
        }
    }
}

/// Element kind from an Android widget class name.
pub fn kind_from_class(class: &str) -> ElementKind {
    let c = class.rsplit('.').next().unwrap_or(class).to_ascii_lowercase();
    if c.contains("checkbox") {
        ElementKind::Checkbox
    } else if c.contains("switch") || c.contains("toggle") {
        ElementKind::Toggle
    } else if c.contains("button") {
        ElementKind::Button
    } else if c.contains("edittext") || c.contains("input") {
        ElementKind::Input
    } else if c.contains("image") {
        ElementKind::Image
    } else if c.contains("text") {
        ElementKind::Text
    } else if c.contains("layout") || c.contains("group") || c.contains("container") {
        ElementKind::Container
    } else {
        ElementKind::Other
    }
}

/// Clips corner coordinates to the screen; `None` when nothing is left.
fn clip(x1: i64, y1: i64, x2: i64, y2: i64, width: u32, height: u32) -> Option<Bounds> {
    let (w, h) = (i64::from(width), i64::from(height));
    let (x1, x2) = (x1.clamp(0, w), x2.clamp(0, w));
    let (y1, y2) = (y1.clamp(0, h), y2.clamp(0, h));
    (x2 > x1 && y2 > y1).then(|| Bounds {
        x: x1 as u32,
        y: y1 as u32,
        width: (x2 - x1) as u32,
        height: (y2 - y1) as u32,
    })
}

#[derive(Deserialize)]
struct MotifView {
    #[serde(default)]
    class: String,
    #[serde(default)]
    text: Option<String>,
    bounds: [i64; 4],
    #[serde(default)]
    clickable: bool,
}

#[derive(Deserialize)]
struct MotifScreen {
    screenshot: String,
    width: u32,
    height: u32,
    #[serde(default)]
    views: Vec<MotifView>,
}

#[derive(Deserialize)]
struct MotifTrace {
    id: String,
    app: String,
    instruction: String,
    #[serde(default)]
    domain: Option<String>,
    screens: Vec<MotifScreen>,
}

#[derive(Deserialize)]
struct Bbox {
    x_min: i64,
    y_min: i64,
    x_max: i64,
    y_max: i64,
}

#[derive(Deserialize)]
struct AcNode {
    #[serde(default)]
    class_name: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    content_description: Option<String>,
    bbox: Bbox,
    #[serde(default)]
    is_clickable: bool,
}

#[derive(Deserialize)]
struct AcEpisode {
    episode_id: serde_json::Value,
    goal: String,
    #[serde(default)]
    app_package: Option<String>,
    #[serde(default)]
    domain: Option<String>,
    screen_width: u32,
    screen_height: u32,
    screenshot_paths: Vec<String>,
    #[serde(default)]
    accessibility_trees: Vec<Vec<AcNode>>,
}

fn motif(line: &str) -> Result<Trace, TraceError> {
    let m: MotifTrace = serde_json::from_str(line).map_err(|e| TraceError::Parse(e.to_string()))?;
    let screens = m
        .screens
        .into_iter()
        .enumerate()
        .map(|(index, s)| Screen {
            index,
            image: s.screenshot,
            width: s.width,
            height: s.height,
            elements: s
                .views
                .into_iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    let [x1, y1, x2, y2] = v.bounds;
                    Some(UiElement {
                        id: format!("v{i}"),
                        kind: kind_from_class(&v.class),
                        text: v.text.unwrap_or_default(),
                        bounds: clip(x1, y1, x2, y2, s.width, s.height)?,
                        clickable: v.clickable,
                    })
                })
                .collect(),
        })
        .collect();
    Trace {
        trace_id: m.id,
        app_name: m.app,
        action_description: m.instruction,
        source: TraceSource::Motif,
        domain: m.domain,
        screens,
    }
    .normalize()
}

fn androidcontrol(line: &str) -> Result<Trace, TraceError> {
    let ep: AcEpisode = serde_json::from_str(line).map_err(|e| TraceError::Parse(e.to_string()))?;
    let id = match &ep.episode_id {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let (w, h) = (ep.screen_width, ep.screen_height);
    let mut trees = ep.accessibility_trees.into_iter();
    let screens = ep
        .screenshot_paths
        .into_iter()
        .enumerate()
        .map(|(index, image)| Screen {
            index,
            image,
            width: w,
            height: h,
            elements: trees
                .next()
                .unwrap_or_default()
                .into_iter()
                .enumerate()
                .filter_map(|(i, n)| {
                    let b = &n.bbox;
                    Some(UiElement {
                        id: format!("n{i}"),
                        kind: kind_from_class(&n.class_name),
                        text: n.text.filter(|t| !t.is_empty()).or(n.content_description).unwrap_or_default(),
                        bounds: clip(b.x_min, b.y_min, b.x_max, b.y_max, w, h)?,
                        clickable: n.is_clickable,
                    })
                })
                .collect(),
        })
        .collect();
    Trace {
        trace_id: format!("ac-{id}"),
        app_name: ep.app_package.unwrap_or_else(|| "unknown".into()),
        action_description: ep.goal,
        source: TraceSource::Androidcontrol,
        domain: ep.domain,
        screens,
    }
    .normalize()
}

pub fn import_line(line: &str, adapter: Adapter) -> Result<Trace, TraceError> {
    match adapter {
        Adapter::Native => ingest_trace(line),
        Adapter::MotifLike => motif(line),
        Adapter::AndroidcontrolLike => androidcontrol(line),
    }
}

/// Converts a JSON Lines file, collecting every failing line.
pub fn import_corpus(text: &str, adapter: Adapter) -> (Vec<Trace>, Vec<LineError>) {
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match import_line(line, adapter) {
            Ok(t) => traces.push(t),
            Err(error) => errors.push(LineError { line: i + 1, error }),
        }
    }
    (traces, errors)
}
