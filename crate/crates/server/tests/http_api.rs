mod support;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use ctlmap::corpus::DataFormat;
use ctlmap_server::http::router;
use ctlmap_server::{Access, Engine, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use support::{fixture, fixture_head, quick_config, NIST};
use tempfile::TempDir;
use tower::ServiceExt;

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, body)
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn post_raw(uri: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(uri).body(Body::from(body)).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

/// An engine with the fixture catalog, 300 training checks and a small model.
fn trained_engine(dir: &TempDir, config: ServiceConfig) -> Arc<Engine> {
    let _ = dir;
    let engine = Engine::open(config, Access::ReadWrite).unwrap();
    engine
        .ingest_catalog(&fixture("nist_controls.jsonl"), DataFormat::Jsonl, None, false)
        .unwrap();
    engine
        .ingest_checks(NIST, &fixture_head("checks.jsonl", 300), DataFormat::Jsonl)
        .unwrap();
    engine.train(NIST).unwrap();
    Arc::new(engine)
}

fn feedback(id: &str, text: &str, accepted: &[&str]) -> Value {
    json!({
        "feedback_id": id,
        "regulation_id": NIST,
        "check_text": text,
        "accepted": accepted,
        "rejected": [],
    })
}

async fn wait_idle(app: &Router) -> Value {
    let started = Instant::now();
    loop {
        let (_, status) = call(app, get("/v1/status")).await;
        if status["retrains_in_flight"] == 0 {
            return status;
        }
        assert!(started.elapsed() < Duration::from_secs(120), "retrain never finished");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn catalog_ingest_conflict_and_replace() {
    let dir = TempDir::new().unwrap();
    let app = router(Arc::new(Engine::open(quick_config(dir.path(), 5), Access::ReadWrite).unwrap()));
    let (status, body) = call(&app, post_raw("/v1/catalogs", fixture("hipaa_controls.jsonl"))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["regulations"][0]["regulation_id"], "HIPAA");
    assert_eq!(body["loaded"], 9);

    let (status, body) = call(&app, post_raw("/v1/catalogs", fixture("hipaa_controls.jsonl"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "RegulationExists");

    let (status, body) = call(&app, post_raw("/v1/catalogs?replace=true", fixture("hipaa_controls.jsonl"))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["regulations"][0]["replaced"], true);
}

#[tokio::test]
async fn malformed_catalog_reports_line() {
    let dir = TempDir::new().unwrap();
    let app = router(Arc::new(Engine::open(quick_config(dir.path(), 5), Access::ReadWrite).unwrap()));
    let mut body = fixture_head("hipaa_controls.jsonl", 3);
    body.extend_from_slice(b"{not json\n");
    let (status, err) = call(&app, post_raw("/v1/catalogs", body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["details"]["line"], 4);
    assert!(err["message"].as_str().unwrap().len() > 3);
}

#[tokio::test]
async fn catalog_filtered_by_regulation_and_csv() {
    let dir = TempDir::new().unwrap();
    let app = router(Arc::new(Engine::open(quick_config(dir.path(), 5), Access::ReadWrite).unwrap()));
    let csv = "regulation_id,control_id,family,title,text\n\
               ACME,A-1,A,Access,Limit access to systems\n\
               OTHER,B-1,B,Backup,Back up data daily\n";
    let (status, body) = call(&app, post_raw("/v1/catalogs?format=csv&regulation_id=ACME", csv.into())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["loaded"], 1);
    assert_eq!(body["rejected"], 1);
    let (_, status) = call(&app, get("/v1/status")).await;
    assert_eq!(status["regulations_loaded"], 1);
}

#[tokio::test]
async fn map_errors() {
    let dir = TempDir::new().unwrap();
    let engine = Engine::open(quick_config(dir.path(), 5), Access::ReadWrite).unwrap();
    engine
        .ingest_catalog(&fixture("nist_controls.jsonl"), DataFormat::Jsonl, None, false)
        .unwrap();
    let app = router(Arc::new(engine));
    let (status, body) = call(&app, post("/v1/map", json!({"text": "x", "regulation_id": "NOPE"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownRegulation");
    let (status, body) = call(&app, post("/v1/map", json!({"text": "x", "regulation_id": NIST, "threshold": 1.5}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "InvalidThreshold");
    let (status, body) = call(&app, post("/v1/map", json!({"regulation_id": NIST}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "InvalidRequest");
    // Catalog only: search still answers without a model.
    let (status, body) = call(
        &app,
        post("/v1/map", json!({"text": "Check whether data disks are encrypted", "regulation_id": NIST, "threshold": 0.0})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["model_generation"], 0);
}

#[tokio::test]
async fn map_result_shape_and_threshold_filter() {
    let dir = TempDir::new().unwrap();
    let app = router(trained_engine(&dir, quick_config(dir.path(), 50)));
    let text = "Check whether data disks are encrypted";
    let (status, low) = call(&app, post("/v1/map", json!({"text": text, "regulation_id": NIST, "threshold": 0.1}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(low["query"], text);
    assert_eq!(low["regulation_id"], NIST);
    assert_eq!(low["model_generation"], 1);
    let results = low["results"].as_array().unwrap();
    assert!(!results.is_empty());
    let conf: Vec<f64> = results.iter().map(|r| r["confidence"].as_f64().unwrap()).collect();
    assert!(conf.windows(2).all(|w| w[0] >= w[1]));
    assert!(conf.iter().all(|c| (0.1..=1.0).contains(c)));

    // Client-side filtering of a low-threshold answer equals asking the server.
    let (_, high) = call(&app, post("/v1/map", json!({"text": text, "regulation_id": NIST, "threshold": 0.6}))).await;
    let filtered: Vec<&Value> = results.iter().filter(|r| r["confidence"].as_f64().unwrap() >= 0.6).collect();
    let served: Vec<&Value> = high["results"].as_array().unwrap().iter().collect();
    assert_eq!(filtered, served);
}

#[tokio::test]
async fn feedback_is_durable_and_validated() {
    let dir = TempDir::new().unwrap();
    let app = router(trained_engine(&dir, quick_config(dir.path(), 50)));
    let (status, ack) = call(&app, post("/v1/feedback", feedback("f-1", "Volumes use full disk encryption", &["SC-28"]))).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    assert_eq!(ack["pending"], 1);
    assert_eq!(ack["retrain_scheduled"], false);
    let log = std::fs::read_to_string(dir.path().join("regulations/NIST-800-53-v4/feedback.jsonl")).unwrap();
    let line: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["feedback_id"], "f-1");
    assert_eq!(line["accepted"], json!(["SC-28"]));
    assert_eq!(line["rejected"], json!([]));

    let (status, body) = call(&app, post("/v1/feedback", feedback("f-1", "again", &["SC-28"]))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "DuplicateFeedbackId");
    let (status, body) = call(&app, post("/v1/feedback", feedback("f-2", "x", &["ZZ-99"]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "InvalidFeedback");
    let (status, _) = call(&app, post("/v1/feedback", feedback("f-3", "   ", &["SC-28"]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let mut unknown_reg = feedback("f-4", "x", &["SC-28"]);
    unknown_reg["regulation_id"] = json!("NOPE");
    let (status, _) = call(&app, post("/v1/feedback", unknown_reg)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // The new document is searchable right away.
    let (_, status) = call(&app, get("/v1/status")).await;
    assert_eq!(status["regulations"][0]["index_documents"], 200 + 300 + 1);
    assert_eq!(status["total_feedback"], 1);
}

#[tokio::test]
async fn feedback_triggers_background_retrain() {
    let dir = TempDir::new().unwrap();
    let app = router(trained_engine(&dir, quick_config(dir.path(), 2)));
    for i in 0..5 {
        let (status, ack) = call(
            &app,
            post("/v1/feedback", feedback(&format!("f-{i}"), &format!("encrypt volume {i}"), &["SC-28"])),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ack["retrain_scheduled"], i % 2 == 1);
        // Mapping keeps working while retrains run.
        let (status, _) = call(&app, post("/v1/map", json!({"text": "encrypt", "regulation_id": NIST}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let status = wait_idle(&app).await;
    assert_eq!(status["retrains"], 2);
    assert_eq!(status["pending_feedback"], 1);
    assert_eq!(status["model_generation"], 3);
}

#[tokio::test]
async fn coverage_follows_feedback() {
    let dir = TempDir::new().unwrap();
    let app = router(trained_engine(&dir, quick_config(dir.path(), 50)));
    let (status, body) = call(&app, get("/v1/coverage?regulation=NOPE")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownRegulation");
    let (_, before) = call(&app, get("/v1/coverage?regulation=NIST-800-53-v4")).await;
    assert_eq!(before["coverage_ratio"], 0.0);
    assert_eq!(before["gaps"].as_array().unwrap().len(), 200);
    call(&app, post("/v1/feedback", feedback("f-1", "disks encrypted", &["SC-28", "SC-13"]))).await;
    let (_, after) = call(&app, get("/v1/coverage?regulation=NIST-800-53-v4")).await;
    assert_eq!(after["covered"], json!(["SC-13", "SC-28"]));
    assert_eq!(after["coverage_ratio"], 0.01);
    assert_eq!(after["per_family"]["SC"]["covered"], 2);
    let resp = app.clone().oneshot(get("/v1/coverage?regulation=NIST-800-53-v4&format=csv")).await.unwrap();
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/csv");
    let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
    assert!(text.starts_with("family,covered,total,ratio\n"));
}

#[tokio::test]
async fn metrics_lists_and_serves_experiments() {
    let dir = TempDir::new().unwrap();
    let engine = Engine::open(quick_config(dir.path(), 5), Access::ReadWrite).unwrap();
    engine.save_experiment("sweep-a", &json!({"curves": []})).unwrap();
    let app = router(Arc::new(engine));
    let (status, body) = call(&app, get("/v1/metrics")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["experiments"], json!(["sweep-a"]));
    let (status, body) = call(&app, get("/v1/metrics?experiment=sweep-a")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"curves": []}));
    let (status, body) = call(&app, get("/v1/metrics?experiment=missing")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownExperiment");
}

#[tokio::test]
async fn bearer_token_guards_posts() {
    let dir = TempDir::new().unwrap();
    let mut config = quick_config(dir.path(), 5);
    config.auth_token = Some("s3cret".into());
    let app = router(Arc::new(Engine::open(config, Access::ReadWrite).unwrap()));
    let (status, body) = call(&app, post_raw("/v1/catalogs", fixture("hipaa_controls.jsonl"))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "Unauthorized");
    let req = Request::post("/v1/catalogs")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::from(fixture("hipaa_controls.jsonl")))
        .unwrap();
    let (status, _) = call(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, get("/v1/status")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn status_shape() {
    let dir = TempDir::new().unwrap();
    let app = router(trained_engine(&dir, quick_config(dir.path(), 50)));
    let (status, body) = call(&app, get("/v1/status")).await;
    assert_eq!(status, StatusCode::OK);
    for key in [
        "regulations_loaded",
        "index_generation",
        "model_generation",
        "pending_feedback",
        "total_feedback",
        "retrains",
        "uptime_seconds",
    ] {
        assert!(body.get(key).is_some(), "missing {key}");
    }
    assert_eq!(body["regulations"][0]["controls"], 200);
    assert_eq!(body["regulations"][0]["training_examples"], 300);
}
