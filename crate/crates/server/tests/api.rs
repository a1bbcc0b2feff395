use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use fringe_core::annot::parse_annotations;
use fringe_core::config::RunConfig;
use fringe_core::detect::Detection;
use fringe_core::pipeline::Predictor;
use fringe_core::synth::{random_spec, render_dataset, SynthParams};
use fringe_core::{FrameRecord, GrayImage};
use fringe_server::{router, SessionStore, ANNOTATIONS_FILE};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Returns the ground-truth ellipses of whichever rendered frame it is shown.
struct TruthPredictor {
    by_pixels: HashMap<Vec<u8>, Vec<Detection>>,
}

impl TruthPredictor {
    fn new(dir: &Path, truth: &[FrameRecord]) -> Self {
        let by_pixels = truth
            .iter()
            .map(|f| {
                let img = GrayImage::load_png(&dir.join(&f.frame_id)).unwrap();
                let dets = f.annotations.iter().map(|&e| Detection::from_ellipse(e, 1.0)).collect();
                (img.to_u8(), dets)
            })
            .collect();
        TruthPredictor { by_pixels }
    }
}

impl Predictor for TruthPredictor {
    fn predict(&self, image: &GrayImage) -> Vec<Detection> {
        self.by_pixels.get(&image.to_u8()).cloned().unwrap_or_default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    store: Arc<SessionStore>,
    app: Router,
    truth: Vec<FrameRecord>,
}

fn fixture(frames: usize, load: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let params = SynthParams {
        width: 160,
        height: 120,
        ..SynthParams::default()
    };
    let specs: Vec<_> = (0..frames as u64).map(|s| random_spec(&params, 100 + s)).collect();
    render_dataset(&specs, &root).unwrap();
    let truth = parse_annotations(&std::fs::read_to_string(root.join(ANNOTATIONS_FILE)).unwrap()).unwrap();
    let predictor = Arc::new(TruthPredictor::new(&root, &truth));
    let store = Arc::new(SessionStore::new(&root, RunConfig::default(), predictor));
    if load {
        store.load().unwrap();
    }
    let app = router(Arc::clone(&store), None);
    Fixture {
        _dir: dir,
        root,
        store,
        app,
        truth,
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn put(uri: &str, body: &Value, if_match: Option<&str>) -> Request<Body> {
    let mut r = Request::put(uri).header(header::CONTENT_TYPE, "application/json");
    if let Some(m) = if_match {
        r = r.header(header::IF_MATCH, m);
    }
    r.body(Body::from(body.to_string())).unwrap()
}

async fn run_job(app: &Router) -> Vec<String> {
    let (s, _, b) = send(app, Request::post("/api/recompute").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = serde_json::from_slice::<Value>(&b).unwrap()["job_id"].as_u64().unwrap();
    let mut seen = Vec::new();
    let start = Instant::now();
    loop {
        let (s, v) = get_json(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        let status = v["status"].as_str().unwrap().to_string();
        if seen.last() != Some(&status) {
            seen.push(status.clone());
        }
        if status == "done" || status == "failed" {
            return seen;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "job stuck: {seen:?}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test]
async fn unloaded_store_answers_503() {
    let f = fixture(1, false);
    let (s, _) = get_json(&f.app, "/api/queue?order=loss_desc").await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    f.store.load().unwrap();
    let (s, _) = get_json(&f.app, "/api/queue?order=loss_desc").await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn queue_rejects_unknown_order() {
    let f = fixture(1, true);
    let (s, v) = get_json(&f.app, "/api/queue?order=random").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("random"));
}

#[tokio::test]
async fn frame_reads_and_unknown_ids() {
    let f = fixture(2, true);
    let id = &f.truth[0].frame_id;

    let (s, h, bytes) = send(&f.app, Request::get(format!("/api/frames/{id}/image")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h[header::CONTENT_TYPE], "image/png");
    assert_eq!(bytes, std::fs::read(f.root.join(id)).unwrap());

    let (s, v) = get_json(&f.app, &format!("/api/frames/{id}/annotations")).await;
    assert_eq!(s, StatusCode::OK);
    let rec: FrameRecord = serde_json::from_value(v).unwrap();
    assert_eq!(rec, f.truth[0]);

    let (s, v) = get_json(&f.app, &format!("/api/frames/{id}/predictions")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["detections"], json!([]));
    assert!(v.get("map_url").is_none());

    for path in ["image", "annotations", "predictions"] {
        let (s, _) = get_json(&f.app, &format!("/api/frames/nope.png/{path}")).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{path}");
    }
}

#[tokio::test]
async fn put_validates_and_checks_revision() {
    let f = fixture(2, true);
    let id = f.truth[0].frame_id.clone();
    let uri = format!("/api/frames/{id}/annotations");

    let mut edited = f.truth[0].clone();
    edited.annotations[0].rings += 1.0;
    let body = serde_json::to_value(&edited).unwrap();
    let (s, h, b) = send(&f.app, put(&uri, &body, Some("\"0\""))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&b).unwrap()["revision"], 1);
    assert_eq!(h[header::ETAG], "\"1\"");

    let (_, v) = get_json(&f.app, &uri).await;
    assert_eq!(serde_json::from_value::<FrameRecord>(v).unwrap(), edited);
    let on_disk = parse_annotations(&std::fs::read_to_string(f.root.join(ANNOTATIONS_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk[0], edited);
    assert_eq!(on_disk[1], f.truth[1]);

    let (s, _, _) = send(&f.app, put(&uri, &body, Some("0"))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let mut bad = body.clone();
    bad["annotations"][0]["a"] = json!(1.0);
    bad["annotations"][0]["b"] = json!(5.0);
    let (s, _, b) = send(&f.app, put(&uri, &bad, None)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&b).unwrap();
    let fields: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert!(fields.iter().any(|f| f.starts_with("annotations[0]")), "{fields:?}");

    let mut renamed = body.clone();
    renamed["frame_id"] = json!("other.png");
    let (s, _, _) = send(&f.app, put(&uri, &renamed, None)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _, _) = send(&f.app, put("/api/frames/nope.png/annotations", &body, None)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _, _) = send(&f.app, put(&uri, &body, Some("latest"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _, b) = send(&f.app, put(&uri, &body, None)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&b).unwrap()["revision"], 2);
}

#[tokio::test]
async fn recompute_job_updates_predictions_and_losses() {
    let f = fixture(3, true);
    let (_, before) = get_json(&f.app, "/api/queue?order=loss_desc").await;
    assert!(before.as_array().unwrap().iter().any(|e| e["loss"].as_f64().unwrap() > 0.0));

    let seen = run_job(&f.app).await;
    assert_eq!(seen.last().map(String::as_str), Some("done"), "{seen:?}");

    let (_, after) = get_json(&f.app, "/api/queue?order=loss_desc").await;
    let entries = after.as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for (e, t) in entries.iter().zip(&f.truth) {
        assert_eq!(e["loss"].as_f64().unwrap(), 0.0);
        assert_eq!(e["frame_id"], t.frame_id.as_str());
    }

    let id = &f.truth[0].frame_id;
    let (_, v) = get_json(&f.app, &format!("/api/frames/{id}/predictions")).await;
    assert_eq!(v["detections"].as_array().unwrap().len(), f.truth[0].annotations.len());
    let url = v["map_url"].as_str().unwrap().to_string();
    let (s, h, _) = send(&f.app, Request::get(&url).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK, "{url}");
    assert_eq!(h[header::CONTENT_TYPE], "image/png");
}

#[tokio::test]
async fn second_recompute_while_active_conflicts() {
    let f = fixture(6, true);
    let (s, _, _) = send(&f.app, Request::post("/api/recompute").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, _, _) = send(&f.app, Request::post("/api/recompute").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = get_json(&f.app, "/api/jobs/999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn corrupted_frame_ranks_first_and_recovers() {
    let f = fixture(4, true);
    run_job(&f.app).await;

    let target = f.truth[2].clone();
    let uri = format!("/api/frames/{}/annotations", target.frame_id);
    let mut broken = target.clone();
    broken.annotations[0].cx += 25.0;
    let (s, _, _) = send(&f.app, put(&uri, &serde_json::to_value(&broken).unwrap(), None)).await;
    assert_eq!(s, StatusCode::OK);
    let (_, q) = get_json(&f.app, "/api/queue?order=loss_desc").await;
    assert_eq!(q[0]["frame_id"], target.frame_id.as_str());
    assert!(q[0]["loss"].as_f64().unwrap() > 0.0);

    let (s, _, _) = send(&f.app, put(&uri, &serde_json::to_value(&target).unwrap(), None)).await;
    assert_eq!(s, StatusCode::OK);
    run_job(&f.app).await;
    let (_, q) = get_json(&f.app, "/api/queue?order=loss_desc").await;
    assert!(q.as_array().unwrap().iter().all(|e| e["loss"].as_f64().unwrap() == 0.0));
}

#[tokio::test]
async fn cors_headers_are_present() {
    let f = fixture(1, true);
    let req = Request::get("/api/queue")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let (_, h, _) = send(&f.app, req).await;
    assert!(h.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}
