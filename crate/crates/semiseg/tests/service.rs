use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use semiseg::formats::{self, SampleEntry, SampleStore};
use semiseg::service::{router, Persistence, Service};
use semiseg_core::annotation::{AnchorBudget, AnnotationRecord, AnnotationStore};
use semiseg_core::sample::Sample;
use semiseg_core::tracking::{Track, TrackMember, TrackStatus};
use semiseg_core::ClassLabel;
use serde_json::{json, Value};
use tower::ServiceExt;

const CANVAS: usize = 8;

fn sample(id: u32) -> Sample {
    let channels = (0..3 * CANVAS * CANVAS).map(|k| ((k as u32 * 7 + id * 31) % 256) as u8).collect();
    Sample { sample_id: id, segment_id: id, frame_index: id as usize, canvas: CANVAS, channels, label: None }
}

fn track(id: u32, samples: std::ops::Range<u32>) -> Track {
    let members = samples
        .map(|s| TrackMember { frame_index: s as usize, segment_id: s, sample_id: Some(s) })
        .collect();
    Track { track_id: id, members, status: TrackStatus::Pending }
}

struct Fixture {
    dir: tempfile::TempDir,
    app: axum::Router,
    svc: Arc<Service>,
}

/// Samples 0..12; track 0 holds 0..5, track 1 holds 5..10, track 2 holds
/// 10..12. Samples 10 and 11 are predicted confidently as cyclist.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<Sample> = (0..12).map(sample).collect();
    let entries = samples
        .iter()
        .map(|s| SampleEntry {
            sample_id: s.sample_id,
            segment_id: s.segment_id,
            frame_index: s.frame_index,
            offset: 0,
            label: None,
            point_count: 100,
            center_distance: 1.0,
            truth_object: None,
            truth_class: None,
        })
        .collect();
    let index = dir.path().join("samples.json");
    formats::write_sample_store(&index, &samples, entries, CANVAS).unwrap();
    let tracks = vec![track(0, 0..5), track(1, 5..10), track(2, 10..12)];
    formats::write_jsonl(&dir.path().join("tracks.jsonl"), &tracks).unwrap();

    let mut preds = Vec::new();
    for id in 0..12u32 {
        let mut p = vec![0.1; 7];
        let k = if id >= 10 { 2 } else { 5 };
        p[k] = 0.4 + id as f64 * 0.01;
        preds.push((id, p));
    }
    let persistence = Persistence { audit: dir.path().join("audit.jsonl"), annotations: dir.path().join("annotations.jsonl") };
    let svc = Arc::new(Service::new(
        AnnotationStore::new(tracks),
        SampleStore::open(&index).unwrap(),
        preds,
        AnchorBudget { per_class: 2, unknown: 3 },
        Some(persistence),
        Arc::new(|| 1_000),
    ));
    Fixture { app: router(svc.clone()), svc, dir }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

#[tokio::test]
async fn label_round_trip_and_conflict() {
    let f = fixture();
    let (_, before) = call_json(&f.app, "GET", "/api/progress", None).await;
    let (s, v) = call_json(&f.app, "POST", "/api/tracks/0/label", Some(json!({ "label": "car" }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["records"].as_array().unwrap().len(), 5);
    assert_eq!(v["status"]["state"], "confirmed");

    let (_, after) = call_json(&f.app, "GET", "/api/progress", None).await;
    assert_eq!(after["confirmed"].as_u64().unwrap(), before["confirmed"].as_u64().unwrap() + 1);
    assert_eq!(after["annotations"].as_u64().unwrap(), before["annotations"].as_u64().unwrap() + 5);
    assert_eq!(f.svc.snapshot().constraints().len(), 4);

    let audit = f.dir.path().join("audit.jsonl");
    let snapshot = f.svc.snapshot();
    let (s, v) = call_json(&f.app, "POST", "/api/tracks/0/label", Some(json!({ "label": "person" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    let (s, _) = call_json(&f.app, "POST", "/api/tracks/0/discard", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(*f.svc.snapshot(), *snapshot);
    assert_eq!(lines(&audit), 1);
}

#[tokio::test]
async fn truncate_then_label() {
    let f = fixture();
    let (s, v) = call_json(&f.app, "POST", "/api/tracks/1/truncate", Some(json!({ "at_index": 3 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["surviving"], 3);
    let (s, v) = call_json(&f.app, "POST", "/api/tracks/1/label", Some(json!({ "label": 4 }))).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<u64> = v["records"].as_array().unwrap().iter().map(|r| r["sample_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![5, 6, 7]);
    assert_eq!(v["records"][0]["label"], "trunk");
    assert_eq!(f.svc.snapshot().constraints().len(), 2);
}

#[tokio::test]
async fn render_matches_stored_bytes() {
    let f = fixture();
    let stored = sample(3);
    for (name, c) in [("height", 0), ("range", 1), ("intensity", 2)] {
        let (s, png_bytes) = call(&f.app, "GET", &format!("/api/samples/3/render?channel={name}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let mut r = png::Decoder::new(std::io::Cursor::new(png_bytes)).read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        assert_eq!((info.width as usize, info.height as usize), (CANVAS, CANVAS));
        for row in 0..CANVAS {
            for col in 0..CANVAS {
                assert_eq!(buf[row * CANVAS + col], stored.at(c, row, col), "{name} ({row},{col})");
            }
        }
    }
    let (s, png_bytes) = call(&f.app, "GET", "/api/samples/3/render?channel=composite", None).await;
    assert_eq!(s, StatusCode::OK);
    let mut r = png::Decoder::new(std::io::Cursor::new(png_bytes)).read_info().unwrap();
    let mut buf = vec![0; r.output_buffer_size().unwrap()];
    r.next_frame(&mut buf).unwrap();
    let k = 2 * CANVAS + 5;
    assert_eq!(&buf[3 * k..3 * k + 3], &[stored.at(0, 2, 5), stored.at(1, 2, 5), stored.at(2, 2, 5)]);
}

#[tokio::test]
async fn error_statuses() {
    let f = fixture();
    let cases = [
        ("GET", "/api/tracks/99", None, StatusCode::NOT_FOUND),
        ("POST", "/api/tracks/99/label", Some(json!({ "label": "car" })), StatusCode::NOT_FOUND),
        ("POST", "/api/tracks/99/discard", None, StatusCode::NOT_FOUND),
        ("GET", "/api/samples/99/render", None, StatusCode::NOT_FOUND),
        ("POST", "/api/anchors/99/confirm", Some(json!({ "label": "car" })), StatusCode::NOT_FOUND),
        ("POST", "/api/tracks/0/label", Some(json!({ "label": "truck" })), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/api/tracks/0/label", Some(json!({ "label": 8 })), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/api/tracks/0/label", Some(json!({})), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/api/tracks/0/truncate", Some(json!({ "at_index": 9 })), StatusCode::UNPROCESSABLE_ENTITY),
        ("GET", "/api/samples/1/render?channel=depth", None, StatusCode::UNPROCESSABLE_ENTITY),
        ("GET", "/api/tracks?status=maybe", None, StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (method, uri, body, expected) in cases {
        let (s, v) = call_json(&f.app, method, uri, body).await;
        assert_eq!(s, expected, "{method} {uri}");
        assert!(v["message"].is_string(), "{method} {uri}");
    }
    assert_eq!(f.svc.snapshot().audit_log().len(), 0);
}

#[tokio::test]
async fn list_filters_and_pages() {
    let f = fixture();
    call_json(&f.app, "POST", "/api/tracks/2/discard", None).await;
    let (s, v) = call_json(&f.app, "GET", "/api/tracks?status=pending", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total"], 2);
    assert_eq!(v["tracks"][0]["track_id"], 0);
    assert_eq!(v["tracks"][0]["length"], 5);
    assert_eq!(v["tracks"][0]["thumbnail"], "/api/samples/0/render?channel=composite");
    let (_, v) = call_json(&f.app, "GET", "/api/tracks?page=1&page_size=2", None).await;
    assert_eq!(v["total"], 3);
    assert_eq!(v["tracks"].as_array().unwrap().len(), 1);
    assert_eq!(v["tracks"][0]["status"]["state"], "discarded");
    let (_, v) = call_json(&f.app, "GET", "/api/tracks/1", None).await;
    assert_eq!(v["sample_ids"], json!([5, 6, 7, 8, 9]));
}

#[tokio::test]
async fn anchors_propose_and_confirm() {
    let f = fixture();
    let (_, v) = call_json(&f.app, "GET", "/api/anchors/candidates", None).await;
    let cyclist = &v["classes"][2];
    assert_eq!(cyclist["class"], "cyclist");
    let ids: Vec<u64> = cyclist["candidates"].as_array().unwrap().iter().map(|c| c["sample_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![11, 10]);
    assert_eq!(v["classes"][5]["candidates"].as_array().unwrap().len(), 2);
    assert_eq!(v["classes"][0]["candidates"].as_array().unwrap().len(), 0);

    let (s, r) = call_json(&f.app, "POST", "/api/anchors/11/confirm", Some(json!({ "label": "cyclist" }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["source"], "anchor");
    let (_, v) = call_json(&f.app, "GET", "/api/anchors/candidates", None).await;
    assert_eq!(v["classes"][2]["confirmed"], 1);
    assert_eq!(v["classes"][2]["candidates"].as_array().unwrap().len(), 1);

    call_json(&f.app, "POST", "/api/tracks/0/label", Some(json!({ "label": "bush" }))).await;
    let (s, _) = call_json(&f.app, "POST", "/api/anchors/2/confirm", Some(json!({ "label": "car" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call_json(&f.app, "POST", "/api/anchors/2/confirm", Some(json!({ "label": "car", "override": true }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(f.svc.snapshot().record(2).unwrap().label, ClassLabel::Car);
}

#[tokio::test]
async fn persisted_log_replays_to_same_state() {
    let f = fixture();
    call_json(&f.app, "POST", "/api/tracks/1/truncate", Some(json!({ "at_index": 2 }))).await;
    call_json(&f.app, "POST", "/api/tracks/0/label", Some(json!({ "label": "person" }))).await;
    call_json(&f.app, "POST", "/api/tracks/2/discard", None).await;
    call_json(&f.app, "POST", "/api/anchors/9/confirm", Some(json!({ "label": "building" }))).await;

    let replayed = Service::load_store(&f.dir.path().join("tracks.jsonl"), &f.dir.path().join("audit.jsonl")).unwrap();
    assert_eq!(replayed, *f.svc.snapshot());
    let records: Vec<AnnotationRecord> = formats::read_jsonl(&f.dir.path().join("annotations.jsonl")).unwrap();
    let expected: Vec<AnnotationRecord> = f.svc.snapshot().records().copied().collect();
    assert_eq!(records, expected);
    assert_eq!(records.len(), 6);
}

#[tokio::test]
async fn concurrent_labels_on_one_track_admit_one_winner() {
    let f = fixture();
    let mut handles = Vec::new();
    for label in ["person", "car", "bush", "trunk"] {
        let app = f.app.clone();
        handles.push(tokio::spawn(async move {
            call(&app, "POST", "/api/tracks/1/label", Some(json!({ "label": label }))).await.0
        }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(lines(&f.dir.path().join("audit.jsonl")), 1);
}
