//! Classifier backends and strict parsing of their answers.
//!
//! A [`Backend`] turns a rendered request into raw response text. [`classify`]
//! handles modality conversion, retries and parsing, and always produces exactly
//! one [`Outcome`] per request.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::prompt::{ContentPart, PromptBundle, Strategy};
use crate::taxonomy::{Category, ImpactLevel, LabelSet, Labels, Taxonomy};

/// Environment variable prefix for backend API keys.
pub const API_KEY_ENV_PREFIX: &str = "IMPACT_GATE_API_KEY_";

/// Default fraction of usable answers at or below which a report cell is redacted.
pub const DEFAULT_VALIDITY_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    TextOnly,
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpEndpoint,
    Replay,
}

fn default_parallel() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    2
}

/// Backend configuration, one entry of the backends file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub capability: Capability,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<PathBuf>,
    /// Directory screenshot paths are resolved against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub retry_backoff_ms: u64,
    /// Sampling temperature sent to HTTP endpoints; 0 unless configured.
    #[serde(default)]
    pub temperature: f64,
}

impl BackendConfig {
    pub fn replay(name: &str, capability: Capability) -> Self {
        BackendConfig {
            name: name.to_string(),
            capability,
            kind: BackendKind::Replay,
            url: None,
            model: None,
            replay_path: None,
            image_root: None,
            max_parallel: default_parallel(),
            timeout_s: default_timeout(),
            retries: 0,
            retry_backoff_ms: 0,
            temperature: 0.0,
        }
    }

    /// `IMPACT_GATE_API_KEY_<NAME>` with the name upper-cased and
    /// non-alphanumerics replaced by `_`.
    pub fn api_key_var(&self) -> String {
        let suffix: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        format!("{API_KEY_ENV_PREFIX}{suffix}")
    }
}

/// Reads a backends file: a JSON array of [`BackendConfig`] (or a single object).
pub fn load_backend_configs(text: &str) -> Result<Vec<BackendConfig>, serde_json::Error> {
    let value: Value = serde_json::from_str(text)?;
    match value {
        Value::Array(_) => serde_json::from_value(value),
        other => Ok(vec![serde_json::from_value(other)?]),
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Io(String),
    #[error("no stored response for trace `{trace_id}` ({strategy}, {backend})")]
    ReplayMiss {
        trace_id: String,
        strategy: Strategy,
        backend: String,
    },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        matches!(self, TransportError::Status { .. } | TransportError::Io(_))
    }
}

/// A request as dispatched to a backend, after modality conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendRequest {
    pub trace_id: String,
    pub strategy: Strategy,
    pub system_text: String,
    pub parts: Vec<ContentPart>,
}

pub trait Backend: Send + Sync {
    fn config(&self) -> &BackendConfig;

    fn complete(&self, request: &BackendRequest) -> Result<String, TransportError>;

    fn name(&self) -> &str {
        &self.config().name
    }
}

/// One stored answer in a replay store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub trace_id: String,
    pub strategy: Strategy,
    pub backend: String,
    pub raw_response: String,
}

/// Deterministic backend answering from stored responses.
pub struct ReplayBackend {
    config: BackendConfig,
    responses: HashMap<(String, Strategy), String>,
}

impl ReplayBackend {
    /// Keeps only records addressed to this backend's name. Later duplicates win.
    pub fn new(config: BackendConfig, records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        let responses = records
            .into_iter()
            .filter(|r| r.backend == config.name)
            .map(|r| ((r.trace_id, r.strategy), r.raw_response))
            .collect();
        ReplayBackend { config, responses }
    }

    pub fn from_jsonl(config: BackendConfig, text: &str) -> Result<Self, TransportError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord = serde_json::from_str(line)
                .map_err(|e| TransportError::Config(format!("replay store line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self::new(config, records))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn complete(&self, request: &BackendRequest) -> Result<String, TransportError> {
        self.responses
            .get(&(request.trace_id.clone(), request.strategy))
            .cloned()
            .ok_or_else(|| TransportError::ReplayMiss {
                trace_id: request.trace_id.clone(),
                strategy: request.strategy,
                backend: self.config.name.clone(),
            })
    }
}

/// Chat-completions style HTTP endpoint.
///
/// The request body carries the system text as a system message and the
/// content parts as a user message (text parts for HTML and the action,
/// `image_url` data URLs for screenshots).
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, TransportError> {
        if config.url.is_none() {
            return Err(TransportError::Config(format!("backend `{}` has no url", config.name)));
        }
        let api_key = std::env::var(config.api_key_var()).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { config, agent, api_key })
    }

    fn image_data_url(&self, image_ref: &str) -> Result<String, TransportError> {
        let path = match &self.config.image_root {
            Some(root) => root.join(image_ref),
            None => PathBuf::from(image_ref),
        };
        let bytes = std::fs::read(&path)
            .map_err(|e| TransportError::Io(format!("reading {}: {e}", path.display())))?;
        let mime = match Path::new(image_ref).extension().and_then(|e| e.to_str()) {
            Some("jpg") | Some("jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    pub fn request_body(&self, request: &BackendRequest) -> Result<Value, TransportError> {
        let mut content = Vec::new();
        for part in &request.parts {
            match part {
                ContentPart::ScreenHtml { index, html } => content.push(json!({
                    "type": "text",
                    "text": format!("Screen {index}:\n{html}"),
                })),
                ContentPart::ScreenImage { image_ref, .. } => content.push(json!({
                    "type": "image_url",
                    "image_url": { "url": self.image_data_url(image_ref)? },
                })),
                ContentPart::Action { text } => content.push(json!({ "type": "text", "text": text })),
            }
        }
        let mut body = json!({
            "messages": [
                { "role": "system", "content": request.system_text },
                { "role": "user", "content": content },
            ],
            "temperature": self.config.temperature,
        });
        if let Some(model) = &self.config.model {
            body["model"] = json!(model);
        }
        Ok(body)
    }
}

impl Backend for HttpBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn complete(&self, request: &BackendRequest) -> Result<String, TransportError> {
        let body = self.request_body(request)?;
        let url = self.config.url.as_deref().unwrap_or_default();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string().as_bytes())
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: text });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::Io(format!("endpoint body is not JSON: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Io("endpoint body lacks choices[0].message.content".into()))
    }
}

/// Builds the backend described by a config entry. Replay stores are read from
/// `replay_path`, resolved against `base_dir` when relative.
pub fn open_backend(config: &BackendConfig, base_dir: &Path) -> Result<Box<dyn Backend>, TransportError> {
    match config.kind {
        BackendKind::Replay => {
            let path = config
                .replay_path
                .as_ref()
                .ok_or_else(|| TransportError::Config(format!("replay backend `{}` has no replay_path", config.name)))?;
            let path = base_dir.join(path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| TransportError::Config(format!("reading {}: {e}", path.display())))?;
            Ok(Box::new(ReplayBackend::from_jsonl(config.clone(), &text)?))
        }
        BackendKind::HttpEndpoint => {
            let mut config = config.clone();
            config.image_root = Some(base_dir.join(config.image_root.unwrap_or_default()));
            Ok(Box::new(HttpBackend::new(config)?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    Unparseable,
    UnknownLabel,
    MissingField,
    TransportFailure,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::Unparseable => "unparseable",
            InvalidReason::UnknownLabel => "unknown_label",
            InvalidReason::MissingField => "missing_field",
            InvalidReason::TransportFailure => "transport_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub trace_id: String,
    pub strategy: Strategy,
    pub backend: String,
    pub impact_level: Option<ImpactLevel>,
    /// Only categories the model answered; absent ones were not answered.
    pub labels: Labels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_text: Option<String>,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidAnswer {
    pub trace_id: String,
    pub strategy: Strategy,
    pub backend: String,
    pub reason: InvalidReason,
    /// Offending field, when the failure is tied to one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub detail: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Prediction(Prediction),
    Invalid(InvalidAnswer),
}

impl Outcome {
    pub fn trace_id(&self) -> &str {
        match self {
            Outcome::Prediction(p) => &p.trace_id,
            Outcome::Invalid(i) => &i.trace_id,
        }
    }

    pub fn prediction(&self) -> Option<&Prediction> {
        match self {
            Outcome::Prediction(p) => Some(p),
            Outcome::Invalid(_) => None,
        }
    }

    pub fn impact_level(&self) -> Option<ImpactLevel> {
        self.prediction().and_then(|p| p.impact_level)
    }

    /// Labels for a category when the answer is usable for it.
    pub fn labels_for(&self, category_id: &str) -> Option<&LabelSet> {
        self.prediction().and_then(|p| p.labels.get(category_id))
    }
}

/// Parsed content of a response, before it is tied to a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub impact_level: Option<ImpactLevel>,
    pub labels: Labels,
    pub reasoning_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub reason: InvalidReason,
    pub field: Option<String>,
    pub detail: String,
}

impl ParseFailure {
    fn new(reason: InvalidReason, field: Option<&str>, detail: impl Into<String>) -> Self {
        ParseFailure {
            reason,
            field: field.map(str::to_string),
            detail: detail.into(),
        }
    }
}

/// Identity of a request, used to stamp outcomes.
#[derive(Debug, Clone, Copy)]
pub struct RequestKey<'a> {
    pub trace_id: &'a str,
    pub strategy: Strategy,
    pub backend: &'a str,
}

impl RequestKey<'_> {
    pub fn outcome(&self, raw: &str, parsed: Result<ParsedResponse, ParseFailure>) -> Outcome {
        match parsed {
            Ok(p) => Outcome::Prediction(Prediction {
                trace_id: self.trace_id.to_string(),
                strategy: self.strategy,
                backend: self.backend.to_string(),
                impact_level: p.impact_level,
                labels: p.labels,
                reasoning_text: p.reasoning_text,
                raw_response: raw.to_string(),
            }),
            Err(f) => Outcome::Invalid(InvalidAnswer {
                trace_id: self.trace_id.to_string(),
                strategy: self.strategy,
                backend: self.backend.to_string(),
                reason: f.reason,
                field: f.field,
                detail: f.detail,
                raw_response: raw.to_string(),
            }),
        }
    }
}

/// Finds the first JSON object embedded in free text (prose, code fences).
pub fn extract_json_object(text: &str) -> Option<Map<String, Value>> {
    let first_object = |s: &str| -> Option<Map<String, Value>> {
        for (pos, _) in s.match_indices('{') {
            let mut stream = serde_json::Deserializer::from_str(&s[pos..]).into_iter::<Value>();
            if let Some(Ok(Value::Object(map))) = stream.next() {
                return Some(map);
            }
        }
        None
    };
    first_object(text).or_else(|| {
        // single-quoted pseudo-JSON
        if text.contains('\'') {
            first_object(&text.replace('\'', "\""))
        } else {
            None
        }
    })
}

/// Lowercase alphanumerics only; "&" reads as "and".
fn squash(s: &str) -> String {
    s.replace('&', "and")
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Lowercase words separated by single spaces; "&" reads as "and".
fn words(s: &str) -> String {
    s.replace('&', " and ")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

const LEVEL_KEYS: [&str; 3] = ["impactlevel", "overallimpactlevel", "finalimpactlevel"];
const REASONING_KEYS: [&str; 4] = ["justification", "reasoning", "explanation", "rationale"];
const NO_IMPACT_MARKERS: [&str; 10] = [
    "n a",
    "na",
    "none",
    "no impact",
    "not applicable",
    "no change",
    "no changes",
    "no significant ui change",
    "no significant change",
    "",
];
const WRAPPER_KEYS: [&str; 6] = ["label", "labels", "option", "options", "value", "selection"];

fn level_from_value(value: &Value) -> Result<ImpactLevel, ParseFailure> {
    let text = match value {
        Value::String(s) => s.clone(),
        Value::Object(map) => match map.iter().find(|(k, _)| squash(k) == "level" || squash(k) == "value") {
            Some((_, v)) => return level_from_value(v),
            None => String::new(),
        },
        other => other.to_string(),
    };
    let w = words(&text);
    let w = w.strip_suffix(" impact").unwrap_or(&w);
    w.parse::<ImpactLevel>().map_err(|_| {
        ParseFailure::new(
            InvalidReason::UnknownLabel,
            Some(crate::prompt::IMPACT_LEVEL_FIELD),
            format!("impact level `{text}` is not one of minimum, moderate, significant"),
        )
    })
}

/// Splits a string answer into candidate option strings.
fn split_items(text: &str, multi_label: bool) -> Vec<String> {
    if !multi_label {
        return vec![text.to_string()];
    }
    // commas inside parentheses belong to notes, not to the option list
    let mut items = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '(' | '[' => {
                depth += 1;
                current.push(ch);
            }
            ')' | ']' => {
                depth -= 1;
                current.push(ch);
            }
            ',' | ';' if depth <= 0 => items.push(std::mem::take(&mut current)),
            _ => current.push(ch),
        }
    }
    items.push(current);
    items
}

fn value_items(value: &Value, multi_label: bool) -> Result<Option<Vec<String>>, String> {
    match value {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(split_items(s, multi_label))),
        Value::Array(items) => {
            let mut out = Vec::new();
            for item in items {
                match value_items(item, multi_label)? {
                    Some(mut v) => out.append(&mut v),
                    None => {}
                }
            }
            Ok(Some(out))
        }
        Value::Object(map) => {
            match map.iter().find(|(k, _)| WRAPPER_KEYS.contains(&squash(k).as_str())) {
                Some((_, v)) => value_items(v, multi_label),
                None => Err(format!("object answer without a label field: {value}")),
            }
        }
        other => Err(format!("answer `{other}` is not text")),
    }
}

/// Splits "Name (note)" into the name and the parenthetical note.
fn strip_note(item: &str) -> (&str, &str) {
    match item.find('(') {
        Some(open) => {
            let close = item.rfind(')').filter(|&c| c > open).unwrap_or(item.len());
            (&item[..open], &item[open + 1..close])
        }
        None => (item, ""),
    }
}

fn match_option<'c>(category: &'c Category, item: &str) -> Option<&'c crate::taxonomy::OptionDef> {
    let target = words(item);
    let target = target.strip_suffix(" timely").unwrap_or(&target);
    if let Some(o) = category.options.iter().find(|o| words(&o.display_name) == target) {
        return Some(o);
    }
    let as_id = target.replace(' ', "_");
    if let Some(o) = category.options.iter().find(|o| o.id == as_id) {
        return Some(o);
    }
    let padded = format!(" {target} ");
    let contained: Vec<_> = category
        .options
        .iter()
        .filter(|o| padded.contains(&format!(" {} ", words(&o.display_name))))
        .collect();
    if contained.len() == 1 {
        return Some(contained[0]);
    }
    if contained.is_empty() && target.len() >= 4 {
        let containing: Vec<_> = category
            .options
            .iter()
            .filter(|o| format!(" {} ", words(&o.display_name)).contains(&padded))
            .collect();
        if containing.len() == 1 {
            return Some(containing[0]);
        }
    }
    None
}

fn parse_category(category: &Category, value: &Value) -> Result<Option<LabelSet>, ParseFailure> {
    let unknown = |detail: String| ParseFailure::new(InvalidReason::UnknownLabel, Some(&category.id), detail);
    let Some(items) = value_items(value, category.multi_label).map_err(unknown)? else {
        return Ok(None);
    };
    let mut set = LabelSet::empty();
    for raw in &items {
        let (name, note) = strip_note(raw);
        let name = name.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.');
        if NO_IMPACT_MARKERS.contains(&words(name).as_str()) {
            continue;
        }
        let option = match_option(category, name).ok_or_else(|| {
            unknown(format!(
                "`{}` is not an option of {}",
                raw.trim(),
                category.display_name
            ))
        })?;
        set.options.insert(option.id.clone());
        if words(name).ends_with(" timely") || words(note).contains("timely") {
            set.time_bound = true;
        }
        let note_words = format!(" {} ", words(note));
        for sub in &option.sub_options {
            if note_words.contains(&format!(" {} ", words(&sub.display_name))) {
                set.sub_options.insert(sub.id.clone());
            }
        }
    }
    if !category.multi_label && set.options.len() > 1 {
        return Err(unknown(format!(
            "{} takes one option, got {}",
            category.display_name,
            set.options.len()
        )));
    }
    Ok(Some(set))
}

/// Parses a model answer.
///
/// The first JSON object in the text is used. Keys match category display
/// names or ids regardless of case, spacing and punctuation. Every strategy
/// needs an impact level; category fields are parsed for strategies that
/// request them and may be missing (recorded as absent, not as empty).
pub fn parse_response(raw: &str, strategy: Strategy, taxonomy: &Taxonomy) -> Result<ParsedResponse, ParseFailure> {
    let object = extract_json_object(raw)
        .ok_or_else(|| ParseFailure::new(InvalidReason::Unparseable, None, "no JSON object found"))?;

    // flatten one level of nesting, outer keys first
    let mut fields: Vec<(String, &Value)> = Vec::new();
    for (k, v) in &object {
        fields.push((squash(k), v));
    }
    for v in object.values() {
        if let Value::Object(inner) = v {
            for (k, v) in inner {
                let key = squash(k);
                if !fields.iter().any(|(existing, _)| *existing == key) {
                    fields.push((key, v));
                }
            }
        }
    }
    let lookup = |keys: &[String]| fields.iter().find(|(k, _)| keys.contains(k)).map(|(_, v)| *v);

    let level_keys: Vec<String> = LEVEL_KEYS.iter().map(|s| s.to_string()).collect();
    let impact_level = match lookup(&level_keys) {
        Some(v) if !v.is_null() => level_from_value(v)?,
        _ => {
            return Err(ParseFailure::new(
                InvalidReason::MissingField,
                Some(crate::prompt::IMPACT_LEVEL_FIELD),
                "response has no impact level",
            ))
        }
    };

    let mut labels = Labels::new();
    if strategy.requests_categories() {
        for category in &taxonomy.categories {
            let keys = vec![squash(&category.display_name), squash(&category.id)];
            if let Some(value) = lookup(&keys) {
                if let Some(set) = parse_category(category, value)? {
                    labels.insert(category.id.clone(), set);
                }
            }
        }
    }

    let reasoning: Vec<String> = REASONING_KEYS
        .iter()
        .filter_map(|k| lookup(&[k.to_string()]))
        .filter_map(|v| match v {
            Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
            _ => None,
        })
        .collect();

    Ok(ParsedResponse {
        impact_level: Some(impact_level),
        labels,
        reasoning_text: if reasoning.is_empty() { None } else { Some(reasoning.join("\n")) },
    })
}

/// Canonical response text for a prediction; parses back to the same labels,
/// level and reasoning.
pub fn serialize_prediction(p: &Prediction, taxonomy: &Taxonomy) -> String {
    let mut obj = Map::new();
    for category in &taxonomy.categories {
        let Some(set) = p.labels.get(&category.id) else { continue };
        let value = if set.is_empty() {
            Value::String("No Impact".into())
        } else {
            let items: Vec<Value> = set
                .options
                .iter()
                .filter_map(|id| category.option(id))
                .map(|o| {
                    let mut text = o.display_name.clone();
                    if set.time_bound {
                        text.push_str(" Timely");
                    }
                    let subs: Vec<&str> = o
                        .sub_options
                        .iter()
                        .filter(|s| set.sub_options.contains(&s.id))
                        .map(|s| s.display_name.as_str())
                        .collect();
                    if !subs.is_empty() {
                        text.push_str(&format!(" ({})", subs.join(", ")));
                    }
                    Value::String(text)
                })
                .collect();
            Value::Array(items)
        };
        obj.insert(category.display_name.clone(), value);
    }
    if let Some(level) = p.impact_level {
        obj.insert("impact level".into(), Value::String(level.as_str().into()));
    }
    if let Some(r) = &p.reasoning_text {
        obj.insert("justification".into(), Value::String(r.clone()));
    }
    Value::Object(obj).to_string()
}

fn dispatch_parts(parts: &[ContentPart], capability: Capability) -> Vec<ContentPart> {
    parts
        .iter()
        .map(|part| match (capability, part) {
            (Capability::TextOnly, ContentPart::ScreenImage { index, html, .. }) => ContentPart::ScreenHtml {
                index: *index,
                html: html.clone(),
            },
            _ => part.clone(),
        })
        .collect()
}

/// Prepares the request a backend will receive for a bundle.
pub fn backend_request(bundle: &PromptBundle, capability: Capability) -> BackendRequest {
    BackendRequest {
        trace_id: bundle.trace_id.clone(),
        strategy: bundle.strategy,
        system_text: bundle.system_text.clone(),
        parts: dispatch_parts(&bundle.content_parts, capability),
    }
}

/// Sends a bundle to a backend and parses the answer.
///
/// Transport failures are retried up to `retries` extra times; whatever
/// happens, exactly one outcome is returned.
pub fn classify(bundle: &PromptBundle, backend: &dyn Backend, taxonomy: &Taxonomy) -> Outcome {
    let config = backend.config();
    let request = backend_request(bundle, config.capability);
    let key = RequestKey {
        trace_id: &bundle.trace_id,
        strategy: bundle.strategy,
        backend: &config.name,
    };
    let attempts = config.retries + 1;
    let mut last_error = None;
    for attempt in 0..attempts {
        match backend.complete(&request) {
            Ok(raw) => {
                let parsed = parse_response(&raw, bundle.strategy, taxonomy);
                return key.outcome(&raw, parsed);
            }
            Err(e) => {
                let retry = e.retryable() && attempt + 1 < attempts;
                last_error = Some(e);
                if !retry {
                    break;
                }
                if config.retry_backoff_ms > 0 {
                    thread::sleep(Duration::from_millis(config.retry_backoff_ms << attempt.min(6)));
                }
            }
        }
    }
    let detail = last_error.map(|e| e.to_string()).unwrap_or_default();
    key.outcome("", Err(ParseFailure::new(InvalidReason::TransportFailure, None, detail)))
}

/// Classifies many bundles with at most `max_parallel` requests in flight.
/// Outcomes come back in input order.
pub fn classify_all(bundles: &[PromptBundle], backend: &dyn Backend, taxonomy: &Taxonomy) -> Vec<Outcome> {
    let threads = backend.config().max_parallel.max(1);
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| {
            use rayon::prelude::*;
            bundles.par_iter().map(|b| classify(b, backend, taxonomy)).collect()
        }),
        Err(_) => bundles.iter().map(|b| classify(b, backend, taxonomy)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redaction {
    Reported,
    Redacted,
}

/// Redaction rule shared by every report cell: a cell is reported only when
/// the usable fraction strictly exceeds the floor.
pub fn redaction_for(usable: usize, total: usize, floor: f64) -> Redaction {
    if total == 0 || (usable as f64) / (total as f64) <= floor {
        Redaction::Redacted
    } else {
        Redaction::Reported
    }
}

/// Whether a category column of one (backend, strategy) cell is reported.
///
/// `category_id` may also be the impact-level field.
pub fn redaction_status(category_id: &str, outcomes: &[Outcome], floor: f64) -> Redaction {
    let usable = outcomes
        .iter()
        .filter(|o| {
            if category_id == crate::prompt::IMPACT_LEVEL_FIELD {
                o.impact_level().is_some()
            } else {
                o.labels_for(category_id).is_some()
            }
        })
        .count();
    redaction_for(usable, outcomes.len(), floor)
}
