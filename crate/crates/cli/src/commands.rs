use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use impact_core::annotation::{import_gold, write_gold_jsonl, GoldRecord, Store};
use impact_core::gate::{assess_all, Policy};
use impact_core::gateway::{open_backend, Backend, BackendConfig, TransportError};
use impact_core::import::{import_corpus, Adapter};
use impact_core::prompt::{default_exemplar_bank, Strategy};
use impact_core::run::{
    category_table_csv, evaluate_run, impact_table_csv, render_markdown, run_label, verify_report, write_report,
    RunError, RunMeta, RunSummary, META_FILE,
};
use impact_core::synth::replay_fixture;
use impact_core::taxonomy::default_taxonomy;
use impact_core::trace::{corpus_stats, dedup_consecutive, ingest_corpus, CorpusStats, GoldLevel, Trace};
use impact_service::{app, serve as serve_http, shutdown_signal, AppState, Gate, StaticDirs};

use crate::manifest::{Config, RunManifest, ServeSection};
use crate::{Common, Failure};

pub const IMPACT_TABLE_FILE: &str = "impact_accuracy.csv";
pub const CATEGORY_TABLE_FILE: &str = "category_accuracy.csv";
pub const MARKDOWN_FILE: &str = "report.md";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const DEFAULT_SEED: u64 = 20240419;
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// The manifest (if any) with command-line flags applied on top.
fn manifest(common: &Common) -> Result<RunManifest, Failure> {
    let mut m = match &common.manifest {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::default(),
    };
    if !common.corpus.is_empty() {
        m.corpus = common.corpus.clone();
    }
    let set = |slot: &mut Option<PathBuf>, flag: &Option<PathBuf>| {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    };
    set(&mut m.gold, &common.gold);
    set(&mut m.policy, &common.policy);
    set(&mut m.out, &common.out);
    set(&mut m.backends, &common.backends_file);
    set(&mut m.exemplars, &common.exemplars);
    set(&mut m.taxonomy, &common.taxonomy);
    if !common.backend.is_empty() {
        m.backend_names = common.backend.clone();
    }
    if !common.strategy.is_empty() {
        m.strategies = common.strategy.clone();
    }
    if common.seed.is_some() {
        m.seed = common.seed;
    }
    Ok(m)
}

fn config(common: &Common, m: &RunManifest) -> Result<Config, Failure> {
    let mut c = Config::load(m)?;
    if let Some(theta) = common.theta {
        c.eval.theta = theta;
    }
    c.eval.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(c)
}

fn read_data(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("reading {}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::data(format!("writing {}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Loads every corpus file; any bad line or repeated trace id is a data error.
fn load_corpus(paths: &[PathBuf]) -> Result<Vec<Trace>, Failure> {
    if paths.is_empty() {
        return Err(Failure::usage("no corpus given (--corpus or manifest `corpus`)"));
    }
    let mut traces = Vec::new();
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        let (ok, errors) = ingest_corpus(&read_data(path)?);
        problems.extend(errors.iter().map(|e| format!("{}:{}: {}", path.display(), e.line, e.error)));
        for t in ok {
            if seen.insert(t.trace_id.clone()) {
                traces.push(t);
            } else {
                problems.push(format!("{}: duplicate trace id `{}`", path.display(), t.trace_id));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Failure::data(problems.join("\n")));
    }
    Ok(traces)
}

fn load_gold(m: &RunManifest, c: &Config) -> Result<Vec<GoldRecord>, Failure> {
    let path = m.gold.as_ref().ok_or_else(|| Failure::usage("no gold export given (--gold or manifest `gold`)"))?;
    import_gold(&read_data(path)?, &c.taxonomy).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn open(config: &BackendConfig, dir: &Path) -> Result<Box<dyn Backend>, Failure> {
    open_backend(config, dir).map_err(|e| match e {
        TransportError::Config(_) => Failure::usage(e.to_string()),
        other => Failure::backend(other.to_string()),
    })
}

#[derive(Debug, Serialize)]
pub struct ImportReport {
    pub adapter: String,
    pub traces: usize,
    pub screens_before_dedup: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub screens_removed: Option<usize>,
    pub stats: CorpusStats,
}

pub fn import(common: &Common, paths: &[PathBuf], adapter: Adapter, dedup: Option<f64>) -> Result<(), Failure> {
    let m = manifest(common)?;
    let inputs: Vec<PathBuf> = if paths.is_empty() { m.corpus.clone() } else { paths.to_vec() };
    if inputs.is_empty() {
        return Err(Failure::usage("no input files"));
    }
    let mut traces = Vec::new();
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for path in &inputs {
        let (ok, errors) = import_corpus(&read_data(path)?, adapter);
        problems.extend(errors.iter().map(|e| format!("{}:{}: {}", path.display(), e.line, e.error)));
        for t in ok {
            if seen.insert(t.trace_id.clone()) {
                traces.push(t);
            } else {
                problems.push(format!("{}: duplicate trace id `{}`", path.display(), t.trace_id));
            }
        }
    }
    let before: usize = traces.iter().map(Trace::screen_count).sum();
    if let Some(threshold) = dedup {
        traces = traces.iter().map(|t| dedup_consecutive(t, threshold)).collect();
    }
    let golds = match &m.gold {
        Some(p) => import_gold(&read_data(p)?, default_taxonomy())
            .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let levels: Vec<GoldLevel<'_>> = golds
        .iter()
        .map(|g| GoldLevel { trace_id: &g.trace_id, impact_level: g.impact_level })
        .collect();
    let stats = corpus_stats(&traces, &levels).map_err(|e| Failure::data(e.to_string()))?;
    let report = ImportReport {
        adapter: adapter.to_string(),
        traces: traces.len(),
        screens_before_dedup: before,
        screens_removed: dedup.map(|_| before - stats.screen_count),
        stats,
    };
    if let Some(out) = &m.out {
        let corpus: String = traces.iter().map(|t| t.to_json_line() + "\n").collect();
        write(&out.join(CORPUS_FILE), corpus)?;
        write(&out.join(STATS_FILE), pretty(&report))?;
    }
    print!("{}", pretty(&report));
    if !problems.is_empty() {
        return Err(Failure::data(format!("{} line(s) rejected:\n{}", problems.len(), problems.join("\n"))));
    }
    Ok(())
}

fn single_strategy(m: &RunManifest) -> Result<Strategy, Failure> {
    match m.strategies.as_slice() {
        [s] => Ok(*s),
        [] => m.serve.strategy.ok_or_else(|| Failure::usage("choose a strategy with --strategy")),
        _ => Err(Failure::usage("classify takes exactly one --strategy")),
    }
}

fn single_backend<'a>(m: &RunManifest, c: &'a Config) -> Result<&'a BackendConfig, Failure> {
    match (m.backend_names.as_slice(), &m.serve.backend, c.backends.as_slice()) {
        ([name], _, _) => c.backend(name),
        ([], Some(name), _) => c.backend(name),
        ([], None, [only]) => Ok(only),
        ([], None, _) => Err(Failure::usage("choose a backend with --backend")),
        _ => Err(Failure::usage("classify takes exactly one --backend")),
    }
}

pub fn classify(common: &Common, trace_id: Option<&str>) -> Result<(), Failure> {
    let m = manifest(common)?;
    let c = config(common, &m)?;
    let strategy = single_strategy(&m)?;
    let backend_config = single_backend(&m, &c)?;
    c.require_bank(strategy)?;
    let backend = open(backend_config, &c.backend_dir)?;
    let mut traces = load_corpus(&m.corpus)?;
    if let Some(id) = trace_id {
        traces.retain(|t| t.trace_id == id);
        if traces.is_empty() {
            return Err(Failure::data(format!("trace `{id}` is not in the corpus")));
        }
    }
    let assessments = assess_all(&traces, strategy, backend.as_ref(), &c.taxonomy, c.bank.as_ref(), &c.policy);
    let lines: String = assessments
        .iter()
        .map(|a| serde_json::to_string(a).expect("assessments serialize") + "\n")
        .collect();
    match &m.out {
        Some(out) => write(&out.join(DECISIONS_FILE), lines)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(lines.as_bytes()).map_err(|e| Failure::data(e.to_string()))?;
        }
    }
    let mut counts = std::collections::BTreeMap::new();
    for a in &assessments {
        *counts.entry(a.decision.decision.as_str()).or_insert(0usize) += 1;
    }
    let parts: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("{} decisions: {}", assessments.len(), parts.join(", "));
    Ok(())
}

fn run_error(e: RunError) -> Failure {
    match e {
        RunError::Eval(_) | RunError::Prompt(_) => Failure::usage(e.to_string()),
        RunError::Io(_) | RunError::Malformed { .. } => Failure::data(e.to_string()),
    }
}

/// Directory a (backend, strategy) cell is written to.
pub fn cell_dir(out: &Path, backend: &str, strategy: Strategy) -> PathBuf {
    out.join(backend).join(strategy.as_str())
}

fn write_tables(out: &Path, runs: &[(RunMeta, RunSummary)]) -> Result<(), Failure> {
    write(&out.join(IMPACT_TABLE_FILE), impact_table_csv(runs))?;
    write(&out.join(CATEGORY_TABLE_FILE), category_table_csv(runs))?;
    write(&out.join(MARKDOWN_FILE), render_markdown(runs))
}

pub fn evaluate(common: &Common) -> Result<(), Failure> {
    let m = manifest(common)?;
    let c = config(common, &m)?;
    let out = m.out.clone().ok_or_else(|| Failure::usage("no output directory (--out or manifest `out`)"))?;
    let names: Vec<String> = if m.backend_names.is_empty() {
        c.backends.iter().map(|b| b.name.clone()).collect()
    } else {
        m.backend_names.clone()
    };
    if names.is_empty() {
        return Err(Failure::usage("no backends configured"));
    }
    let strategies: Vec<Strategy> = if m.strategies.is_empty() { Strategy::ALL.to_vec() } else { m.strategies.clone() };
    for s in &strategies {
        c.require_bank(*s)?;
    }
    let backends = names
        .iter()
        .map(|n| c.backend(n).and_then(|b| open(b, &c.backend_dir)))
        .collect::<Result<Vec<_>, _>>()?;
    let traces = load_corpus(&m.corpus)?;
    let golds = load_gold(&m, &c)?;

    let mut runs = Vec::new();
    for backend in &backends {
        for &strategy in &strategies {
            let report = evaluate_run(&traces, &golds, backend.as_ref(), strategy, &c.eval, &c.taxonomy, c.bank.as_ref())
                .map_err(run_error)?;
            for w in &report.meta.warnings {
                eprintln!("warning: {}: {w}", run_label(&report.meta));
            }
            write_report(&report, &cell_dir(&out, backend.name(), strategy)).map_err(run_error)?;
            eprintln!(
                "{}: impact {}/{} correct, {} invalid",
                run_label(&report.meta),
                report.summary.impact.correct,
                report.summary.impact.n,
                report.summary.impact.invalid
            );
            runs.push((report.meta, report.summary));
        }
    }
    write_tables(&out, &runs)
}

/// Run directories under `dir`: itself if it holds a report, otherwise its
/// report-holding descendants up to two levels down, in path order.
fn find_runs(dir: &Path) -> Vec<PathBuf> {
    if dir.join(META_FILE).is_file() {
        return vec![dir.to_path_buf()];
    }
    let mut found = Vec::new();
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    children.sort();
    for child in children {
        if child.join(META_FILE).is_file() {
            found.push(child);
            continue;
        }
        let mut grand: Vec<PathBuf> = fs::read_dir(&child)
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(META_FILE).is_file()).collect())
            .unwrap_or_default();
        grand.sort();
        found.extend(grand);
    }
    found
}

pub fn report(common: &Common, dirs: &[PathBuf]) -> Result<(), Failure> {
    let m = manifest(common)?;
    let roots: Vec<PathBuf> = if dirs.is_empty() { m.out.iter().cloned().collect() } else { dirs.to_vec() };
    let run_dirs: Vec<PathBuf> = roots.iter().flat_map(|d| find_runs(d)).collect();
    if run_dirs.is_empty() {
        return Err(Failure::usage("no run directories found"));
    }
    let mut runs = Vec::new();
    let mut inconsistent = Vec::new();
    for dir in &run_dirs {
        let verified = verify_report(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        for file in &verified.mismatches {
            inconsistent.push(format!("{}: {file} disagrees with per-item records", dir.display()));
        }
        runs.push((verified.meta, verified.recomputed));
    }
    let markdown = render_markdown(&runs);
    if let Some(out) = &common.out {
        write_tables(out, &runs)?;
    }
    print!("{markdown}");
    if !inconsistent.is_empty() {
        return Err(Failure::data(format!("inconsistent reports:\n{}", inconsistent.join("\n"))));
    }
    Ok(())
}

pub fn synth(common: &Common) -> Result<(), Failure> {
    let out = common.out.clone().ok_or_else(|| Failure::usage("synth needs --out"))?;
    let seed = common.seed.unwrap_or(DEFAULT_SEED);
    let taxonomy = default_taxonomy();
    let fx = replay_fixture(taxonomy, seed);
    let corpus: String = fx.traces.iter().map(|t| t.to_json_line() + "\n").collect();
    let replay: String = fx
        .records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    let manifest = RunManifest {
        backends: Some("backends.json".into()),
        exemplars: Some("exemplars.json".into()),
        corpus: vec![CORPUS_FILE.into()],
        gold: Some("gold.jsonl".into()),
        out: Some("report".into()),
        seed: Some(seed),
        serve: ServeSection {
            data_dir: Some("data".into()),
            backend: fx.backends.first().map(|b| b.name.clone()),
            strategy: Some(Strategy::Kap),
            ..ServeSection::default()
        },
        ..RunManifest::default()
    };
    write(&out.join(CORPUS_FILE), corpus)?;
    write(&out.join("gold.jsonl"), write_gold_jsonl(&fx.golds))?;
    write(&out.join("backends.json"), pretty(&fx.backends))?;
    write(&out.join("replay.jsonl"), replay)?;
    write(&out.join("exemplars.json"), pretty(default_exemplar_bank()))?;
    write(&out.join("policy.json"), Policy::default().to_json() + "\n")?;
    write(&out.join("manifest.json"), pretty(&manifest))?;
    eprintln!(
        "wrote {} traces, {} gold records, {} replay responses to {}",
        fx.traces.len(),
        fx.golds.len(),
        fx.records.len(),
        out.display()
    );
    Ok(())
}

pub fn serve(common: &Common, addr: Option<String>, data_dir: Option<PathBuf>) -> Result<(), Failure> {
    let m = manifest(common)?;
    let c = config(common, &m)?;
    let data_dir = data_dir
        .or_else(|| m.serve.data_dir.clone())
        .ok_or_else(|| Failure::usage("no data directory (--data-dir or manifest serve.data_dir)"))?;
    let addr = addr.or_else(|| m.serve.addr.clone()).unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let token = match &m.serve.token_env {
        Some(var) => Some(
            std::env::var(var)
                .map_err(|_| Failure::usage(format!("token variable `{var}` is not set")))?
                .into(),
        ),
        None => None,
    };
    let gate = match m.backend_names.first().or(m.serve.backend.as_ref()) {
        Some(name) => {
            let strategy = m.strategies.first().copied().or(m.serve.strategy).unwrap_or(Strategy::Kap);
            c.require_bank(strategy)?;
            Some(Arc::new(Gate {
                strategy,
                backend: open(c.backend(name)?, &c.backend_dir)?,
                policy: c.policy.clone(),
                bank: c.bank.clone(),
            }))
        }
        None => None,
    };
    let traces = if m.corpus.is_empty() { Vec::new() } else { load_corpus(&m.corpus)? };
    let store = Arc::new(
        Store::open(&data_dir, c.taxonomy.clone())
            .map_err(|e| Failure::data(format!("{}: {e}", data_dir.display())))?,
    );
    let added = store.add_traces(traces).map_err(|e| Failure::data(e.to_string()))?;
    let dirs = StaticDirs { ui: m.serve.ui_dir.clone(), images: m.serve.image_dir.clone() };
    let router = app(AppState { store: store.clone(), gate, token }, &dirs);

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::usage(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::usage(format!("cannot listen on {addr}: {e}")))?;
        eprintln!("listening on {addr} ({added} new traces loaded)");
        serve_http(listener, router, store, shutdown_signal())
            .await
            .map_err(|e| Failure::data(e.to_string()))
    })
}
