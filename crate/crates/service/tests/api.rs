use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use impact_core::annotation::Store;
use impact_core::gate::Policy;
use impact_core::gateway::{BackendConfig, Capability, ReplayBackend, ReplayRecord};
use impact_core::prompt::Strategy;
use impact_core::synth::{random_labels, synth_corpus};
use impact_core::taxonomy::{default_taxonomy, Taxonomy};
use impact_core::trace::TraceSource;
use impact_service::{api_router, app, serve, AppState, Gate, StaticDirs, TOKEN_HEADER};
use rand_chacha::rand_core::SeedableRng;

fn taxonomy() -> Arc<Taxonomy> {
    Arc::new(default_taxonomy().clone())
}

fn store_with(n: usize) -> Arc<Store> {
    let store = Arc::new(Store::in_memory(taxonomy()));
    store.add_traces(synth_corpus(n, "svc", TraceSource::Motif, 7)).unwrap();
    store
}

fn state(store: Arc<Store>) -> AppState {
    AppState { store, gate: None, token: None }
}

async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(router, method, uri, body, None).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn call_raw(
    router: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(TOKEN_HEADER, t);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn answer(trace_id: &str, annotator: &str, seed: u64, level: &str) -> Value {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    json!({
        "trace_id": trace_id,
        "annotator_id": annotator,
        "labels": random_labels(default_taxonomy(), &mut rng),
        "impact_level": level,
        "justification": "seen on the last screen",
    })
}

#[tokio::test]
async fn fresh_store_reports_zero_summary() {
    let router = api_router(state(Arc::new(Store::in_memory(taxonomy()))));
    let (status, body) = call(&router, "GET", "/export/summary", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["total_traces"], 0);
    assert_eq!(body["gold_ready"], 0);
    assert_eq!(body["skipped_incomplete"], 0);
    let (status, bytes) = call_raw(&router, "GET", "/export/gold", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(bytes.is_empty());
}

#[tokio::test]
async fn taxonomy_endpoint_serves_all_categories() {
    let router = api_router(state(store_with(0)));
    let (status, body) = call(&router, "GET", "/taxonomy", None).await;
    assert_eq!(status, StatusCode::OK);
    let cats = body["categories"].as_array().unwrap();
    assert_eq!(cats.len(), 10);
    let options: usize = cats.iter().map(|c| c["options"].as_array().unwrap().len()).sum();
    assert_eq!(options, 35);
}

#[tokio::test]
async fn full_workflow_over_http() {
    let router = api_router(state(store_with(3)));
    for (id, role) in [("a1", "annotator"), ("a2", "annotator"), ("j1", "adjudicator")] {
        let (status, _) = call(&router, "POST", "/annotators", Some(json!({"id": id, "role": role}))).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (status, body) = call(&router, "POST", "/annotators", Some(json!({"id": "a1", "role": "both"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "duplicate_id");

    let (status, body) = call(&router, "GET", "/tasks/next?annotator=nobody", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_annotator");
    let (status, _) = call(&router, "GET", "/tasks/next", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // Adjudicator-only ids get nothing until something needs adjudication.
    let (_, body) = call(&router, "GET", "/tasks/next?annotator=j1", None).await;
    assert!(body["task"].is_null());

    let mut decided = Vec::new();
    for round in 0..3u64 {
        let (_, t1) = call(&router, "GET", "/tasks/next?annotator=a1", None).await;
        let (_, t2) = call(&router, "GET", "/tasks/next?annotator=a2", None).await;
        let id = t1["task"]["trace_id"].as_str().unwrap().to_string();
        assert_eq!(t2["task"]["trace_id"], id.as_str(), "both annotators land on the same trace");
        assert_eq!(t1["task"]["kind"], "annotate");

        let (status, view) = call(&router, "GET", &format!("/traces/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let screens = view["trace"]["screens"].as_array().unwrap().len();
        let urls = view["image_urls"].as_array().unwrap();
        assert_eq!(urls.len(), screens);
        assert!(urls[0].as_str().unwrap().starts_with("/images/screens/"));

        let (a, b) = match round {
            0 => (answer(&id, "a1", 1, "moderate"), answer(&id, "a2", 1, "moderate")),
            1 => (answer(&id, "a1", 2, "minimum"), answer(&id, "a2", 3, "significant")),
            _ => (
                json!({"trace_id": id, "annotator_id": "a1", "skipped": true, "skip_reason": "target screen never reached"}),
                answer(&id, "a2", 4, "minimum"),
            ),
        };
        let (status, st) = call(&router, "POST", "/annotations", Some(a)).await;
        assert_eq!(status, StatusCode::OK, "{st}");
        if round == 2 {
            assert_eq!(st["state"], "skipped_incomplete");
            let (status, body) = call(&router, "POST", "/annotations", Some(b)).await;
            assert_eq!(status, StatusCode::CONFLICT);
            assert_eq!(body["error"], "trace_closed");
        } else {
            assert_eq!(st["state"], "single_annotated");
            let (_, st) = call(&router, "POST", "/annotations", Some(b)).await;
            decided.push((id.clone(), st["state"].as_str().unwrap().to_string()));
        }
    }
    assert_eq!(decided[0].1, "gold_ready");
    assert_eq!(decided[1].1, "needs_adjudication");
    let disputed = decided[1].0.clone();

    let (_, pending) = call(&router, "GET", "/adjudications/pending", None).await;
    assert_eq!(pending.as_array().unwrap().len(), 1);
    assert_eq!(pending[0]["trace_id"], disputed.as_str());
    assert!(pending[0]["disagreements"].as_array().unwrap().iter().any(|f| f == "impact_level"));

    let (_, view) = call(&router, "GET", &format!("/traces/{disputed}"), None).await;
    assert_eq!(view["records"].as_array().unwrap().len(), 2, "adjudicator sees both records");

    let (_, next) = call(&router, "GET", "/tasks/next?annotator=j1", None).await;
    assert_eq!(next["task"]["kind"], "adjudicate");
    assert_eq!(next["task"]["trace_id"], disputed.as_str());

    let (status, body) = call(&router, "POST", "/adjudications", Some(answer(&disputed, "a1", 5, "moderate"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "adjudicator_conflict");

    let (status, gold) = call(&router, "POST", "/adjudications", Some(answer(&disputed, "j1", 2, "moderate"))).await;
    assert_eq!(status, StatusCode::OK, "{gold}");
    assert_eq!(gold["provenance"], "adjudicated");
    assert_eq!(gold["impact_level"], "moderate", "median of minimum, significant, moderate");

    let (status, bytes) = call_raw(&router, "GET", "/export/gold", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let lines: Vec<Value> = String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["trace_id"].as_str() < lines[1]["trace_id"].as_str());

    let (_, summary) = call(&router, "GET", "/export/summary", None).await;
    assert_eq!(summary["gold_ready"], 2);
    assert_eq!(summary["agreement"], 1);
    assert_eq!(summary["adjudicated"], 1);
    assert_eq!(summary["skipped_incomplete"], 1);
    assert_eq!(summary["skipped_by_source"]["motif"], 1);

    let (_, filtered) = call(&router, "GET", "/export/summary?source=androidcontrol", None).await;
    assert_eq!(filtered["total_traces"], 0);
    let (status, _) = call(&router, "GET", "/export/summary?source=bogus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn submission_errors_map_to_statuses() {
    let store = store_with(2);
    let router = api_router(state(store.clone()));
    call(&router, "POST", "/annotators", Some(json!({"id": "a1", "role": "annotator"}))).await;
    call(&router, "POST", "/annotators", Some(json!({"id": "a2", "role": "annotator"}))).await;

    let (status, body) = call(&router, "POST", "/annotations", Some(answer("svc-0001", "a1", 1, "minimum"))).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["error"], "not_assigned");

    let (_, t) = call(&router, "GET", "/tasks/next?annotator=a1", None).await;
    let id = t["task"]["trace_id"].as_str().unwrap().to_string();
    let mut partial = answer(&id, "a1", 1, "minimum");
    partial["labels"].as_object_mut().unwrap().remove("reversibility");
    let (status, body) = call(&router, "POST", "/annotations", Some(partial)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "validation_error");

    let (status, _) = call(&router, "POST", "/annotations", Some(answer(&id, "a1", 1, "minimum"))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&router, "POST", "/annotations", Some(answer(&id, "a1", 1, "minimum"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "duplicate_submission");

    let (status, body) = call(&router, "POST", "/adjudications", Some(answer(&id, "a2", 1, "minimum"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "wrong_state");

    let (status, body) = call(&router, "GET", "/traces/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
}

#[tokio::test]
async fn token_guards_api_routes() {
    let mut st = state(store_with(1));
    st.token = Some("s3cret".into());
    let router = api_router(st);
    let (status, _) = call_raw(&router, "GET", "/export/summary", None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call_raw(&router, "GET", "/export/summary", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call_raw(&router, "GET", "/export/summary", None, Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
}

fn gate(records: Vec<ReplayRecord>) -> Arc<Gate> {
    let config = BackendConfig::replay("replay", Capability::Multimodal);
    Arc::new(Gate {
        strategy: Strategy::ZeroShot,
        backend: Box::new(ReplayBackend::new(config, records)),
        policy: Policy::default(),
        bank: None,
    })
}

#[tokio::test]
async fn assess_returns_decisions_from_replay() {
    let store = store_with(2);
    let record = |id: &str, raw: &str| ReplayRecord {
        trace_id: id.into(),
        strategy: Strategy::ZeroShot,
        backend: "replay".into(),
        raw_response: raw.into(),
    };
    let mut st = state(store.clone());
    st.gate = Some(gate(vec![
        record("svc-0001", r#"{"impact level": "moderate"}"#),
        record("svc-0002", "I would rather not say."),
    ]));
    let router = api_router(st);

    let (status, body) = call(&router, "POST", "/assess", Some(json!({"trace_id": "svc-0001"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["trace_id"], "svc-0001");
    assert_eq!(body["decision"], "confirm_with_summary");
    assert!(body["summary_text"].as_str().unwrap().contains(" in "));

    let (_, body) = call(&router, "POST", "/assess", Some(json!({"trace_id": "svc-0002"}))).await;
    assert_eq!(body["decision"], "defer_to_human", "unparseable answers defer");

    let inline = (*store.trace("svc-0001").unwrap()).clone();
    let (_, body) = call(&router, "POST", "/assess", Some(json!({"trace": inline}))).await;
    assert_eq!(body["decision"], "confirm_with_summary");

    let (status, _) = call(&router, "POST", "/assess", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&router, "POST", "/assess", Some(json!({"trace_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn assess_without_gate_is_unavailable() {
    let router = api_router(state(store_with(1)));
    let (status, body) = call(&router, "POST", "/assess", Some(json!({"trace_id": "svc-0001"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "gate_unconfigured");
}

#[tokio::test]
async fn static_files_and_images_are_served() {
    let ui = tempfile::tempdir().unwrap();
    let images = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>ui</html>").unwrap();
    std::fs::create_dir_all(images.path().join("screens")).unwrap();
    std::fs::write(images.path().join("screens/a.png"), b"\x89PNG").unwrap();
    let mut st = state(store_with(0));
    st.token = Some("t".into());
    let router = app(
        st,
        &StaticDirs { ui: Some(ui.path().to_path_buf()), images: Some(images.path().to_path_buf()) },
    );
    let (status, bytes) = call_raw(&router, "GET", "/index.html", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"<html>ui</html>");
    let (status, bytes) = call_raw(&router, "GET", "/images/screens/a.png", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"\x89PNG");
}

#[tokio::test]
async fn graceful_shutdown_persists_and_restart_replays() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path(), taxonomy()).unwrap());
    store.add_traces(synth_corpus(2, "svc", TraceSource::Motif, 7)).unwrap();
    let router = api_router(state(store.clone()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, router.clone(), store.clone(), async {
        let _ = rx.await;
    }));
    call(&router, "POST", "/annotators", Some(json!({"id": "a1", "role": "annotator"}))).await;
    let (_, t) = call(&router, "GET", "/tasks/next?annotator=a1", None).await;
    let id = t["task"]["trace_id"].as_str().unwrap().to_string();
    call(&router, "POST", "/annotations", Some(answer(&id, "a1", 9, "minimum"))).await;
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
    let before = store.snapshot();
    drop(router);
    drop(store);

    let reopened = Arc::new(Store::open(dir.path(), taxonomy()).unwrap());
    assert_eq!(reopened.snapshot(), before);
    let router = api_router(state(reopened));
    let (_, st) = call(&router, "GET", &format!("/traces/{id}"), None).await;
    assert_eq!(st["task"]["state"], "single_annotated");
}
