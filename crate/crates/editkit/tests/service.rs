mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use sketchmod::network::{ModelConfig, SketchMod};
use sketchmod_editkit::service::{router, LoadedModel, ModelSlot, ServiceConfig};
use tower::ServiceExt;

fn app() -> Router {
    let slot = ModelSlot::with_model(LoadedModel::new(common::model(), "stage2", "memory"));
    router(Arc::new(slot), &ServiceConfig::default())
}

fn empty_app() -> Router {
    router(Arc::new(ModelSlot::empty()), &ServiceConfig::default())
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map(|b| Body::from(b.to_owned())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn post(app: &Router, uri: &str, body: &Value) -> (StatusCode, Value) {
    let (status, text) = send(app, Method::POST, uri, Some(&body.to_string())).await;
    (status, serde_json::from_str(&text).unwrap())
}

fn sketch_json() -> Value {
    serde_json::to_value(common::sketch()).unwrap()
}

fn stroke_json() -> Value {
    serde_json::to_value(common::stroke()).unwrap()
}

fn expand_request() -> Value {
    json!({ "mode": "expand", "target": sketch_json(), "source": stroke_json() })
}

#[tokio::test]
async fn health_reports_ok() {
    let (status, body) = send(&empty_app(), Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, r#"{"status":"ok"}"#);
}

#[tokio::test]
async fn model_info_matches_loaded_model() {
    let (status, body) = send(&app(), Method::GET, "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: Value = serde_json::from_str(&body).unwrap();
    common::assert_valid("ModelInfo", &info);
    assert_eq!(info["config_hash"], ModelConfig::tiny().hash());
    assert_eq!(info["content_hash"], common::model().content_hash());
}

#[tokio::test]
async fn requests_without_a_model_conflict() {
    let app = empty_app();
    let (status, body) = send(&app, Method::GET, "/model", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body.contains("model_not_loaded"));
    let (status, body) = post(&app, "/edit", &expand_request()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    common::assert_valid("ErrorBody", &body);
    // Pure geometry needs no model.
    let (status, _) = post(&app, "/normalize", &json!({ "stroke": stroke_json() })).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn malformed_json_is_rejected_with_error_body() {
    let (status, text) = send(&app(), Method::POST, "/edit", Some("{\"mode\": \"expand\", ")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body: Value = serde_json::from_str(&text).unwrap();
    common::assert_valid("ErrorBody", &body);
    assert_eq!(body["error"], "invalid_request");
}

#[tokio::test]
async fn schema_violations_report_the_field_path() {
    let app = app();
    let mut req = expand_request();
    req["target"]["strokes"][1]["points"][2] = json!([0.1, "x"]);
    let (status, body) = post(&app, "/edit", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["path"], "target.strokes[1].points[2][1]");

    let mut req = expand_request();
    req["colour"] = json!("red");
    let (status, body) = post(&app, "/edit", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("colour"));

    let (status, body) = post(&app, "/edit", &json!({ "mode": "shrink", "target": sketch_json() })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["path"], "mode");

    let (status, body) = post(&app, "/edit", &json!({ "mode": "expand", "target": sketch_json() })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["path"], "source");

    let (status, body) = post(&app, "/normalize", &json!({ "stroke": { "points": [], "pen": [] } })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["path"], "stroke");
}

#[tokio::test]
async fn domain_errors_are_unprocessable() {
    let app = app();
    let req = json!({ "mode": "replace", "target": sketch_json(), "source": stroke_json(), "replace_index": 3 });
    let (status, body) = post(&app, "/edit", &req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "index_out_of_range");

    let req =
        json!({ "mode": "manipulate", "target": sketch_json(), "attribute_overrides": [{ "index": 9, "theta": 1.0 }] });
    let (status, body) = post(&app, "/edit", &req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "index_out_of_range");

    let req = json!({ "mode": "reconstruct", "target": sketch_json(), "decode_temperature": -1.0 });
    let (status, body) = post(&app, "/edit", &req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "invalid_temperature");
}

#[tokio::test]
async fn manipulate_without_overrides_equals_reconstruct() {
    let app = app();
    for seed in [0u64, 7] {
        let (s1, edit) = post(
            &app,
            "/edit",
            &json!({ "mode": "manipulate", "target": sketch_json(), "decode_temperature": 0.7, "seed": seed }),
        )
        .await;
        let (s2, recon) = post(
            &app,
            "/reconstruct",
            &json!({ "sketch": sketch_json(), "decode_temperature": 0.7, "seed": seed }),
        )
        .await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
        assert_eq!(edit["edited"].to_string(), recon["edited"].to_string());
    }
}

#[tokio::test]
async fn responses_are_deterministic() {
    let app = app();
    let mut req = expand_request();
    req["decode_temperature"] = json!(0.9);
    req["seed"] = json!(42);
    let body = req.to_string();
    let (_, a) = send(&app, Method::POST, "/edit", Some(&body)).await;
    let (_, b) = send(&app, Method::POST, "/edit", Some(&body)).await;
    assert_eq!(a, b);
    // A fresh service over the same checkpoint answers identically.
    let (_, c) = send(&self::app(), Method::POST, "/edit", Some(&body)).await;
    assert_eq!(a, c);
    req["seed"] = json!(43);
    let (_, d) = send(&app, Method::POST, "/edit", Some(&req.to_string())).await;
    assert_ne!(a, d);
}

#[tokio::test]
async fn concurrent_requests_share_the_model() {
    let app = app();
    let body = expand_request().to_string();
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { send(&app, Method::POST, "/edit", Some(&body)).await })
        })
        .collect();
    let mut outs = Vec::new();
    for t in tasks {
        let (status, text) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        outs.push(text);
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

/// Request/response pairs checked against the schema and the committed files.
#[tokio::test]
async fn golden_exchanges() {
    let app = app();
    let overrides: Value =
        serde_json::from_str(&std::fs::read_to_string(common::fixture("overrides.json")).unwrap()).unwrap();
    let cases = [
        ("edit_expand", "/edit", "EditRequest", expand_request()),
        (
            "edit_replace",
            "/edit",
            "EditRequest",
            json!({ "mode": "replace", "target": sketch_json(), "source": stroke_json(), "replace_index": 1 }),
        ),
        (
            "edit_manipulate",
            "/edit",
            "EditRequest",
            json!({ "mode": "manipulate", "target": sketch_json(), "attribute_overrides": overrides }),
        ),
        (
            "edit_expand_geometry",
            "/edit",
            "EditRequest",
            json!({ "mode": "expand", "target": sketch_json(), "source": stroke_json(), "geometry_only": true }),
        ),
        (
            "reconstruct_sampled",
            "/reconstruct",
            "ReconstructRequest",
            json!({ "sketch": sketch_json(), "decode_temperature": 0.5, "seed": 3 }),
        ),
        (
            "normalize",
            "/normalize",
            "NormalizeRequest",
            json!({ "stroke": stroke_json() }),
        ),
    ];
    for (name, uri, req_def, req) in cases {
        common::assert_valid(req_def, &req);
        let (status, resp) = post(&app, uri, &req).await;
        assert_eq!(status, StatusCode::OK, "{name}: {resp}");
        let resp_def = if uri == "/normalize" {
            "NormalizeResponse"
        } else {
            "EditResponse"
        };
        common::assert_valid(resp_def, &resp);
        let exchange = json!({ "request": req, "response": resp });
        common::check_golden(
            &format!("service/{name}.json"),
            &serde_json::to_string_pretty(&exchange).unwrap(),
        );
    }
}

#[tokio::test]
async fn edit_results_honour_the_contract() {
    let app = app();
    let k = common::sketch().len();
    let (_, resp) = post(&app, "/edit", &expand_request()).await;
    assert_eq!(resp["edited"]["strokes"].as_array().unwrap().len(), k + 1);
    assert_eq!(resp["source_index"], k);
    assert!(resp["refined_attributes"].is_object());
    let geometry = resp["geometry"]["strokes"].as_array().unwrap();
    for (i, s) in sketch_json()["strokes"].as_array().unwrap().iter().enumerate() {
        assert_eq!(&geometry[i], s, "target stroke {i} changed in geometry output");
    }
    let req = json!({ "mode": "replace", "target": sketch_json(), "source": stroke_json(), "replace_index": 0 });
    let (_, resp) = post(&app, "/edit", &req).await;
    assert_eq!(resp["edited"]["strokes"].as_array().unwrap().len(), k);
    assert!(resp["svg"].as_str().unwrap().starts_with("<svg"));
    let png = resp["raster"]["png_base64"].as_str().unwrap();
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD.decode(png).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let slot = Arc::new(ModelSlot::empty());
    let config = ServiceConfig {
        cors_origins: vec!["http://localhost:5173".into()],
        ..ServiceConfig::default()
    };
    let app = router(slot, &config);
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/edit")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/edit")
        .header(header::ORIGIN, "http://elsewhere.example")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[test]
fn reload_swaps_the_snapshot_when_the_checkpoint_changes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let slot = ModelSlot::watching(&path);
    assert!(slot.get().is_none());

    common::model().save(&path, "stage1").unwrap();
    assert!(slot.reload().unwrap());
    let first = slot.get().unwrap();
    assert_eq!(first.content_hash, common::model().content_hash());
    assert!(!slot.reload().unwrap(), "unchanged file reloads");

    let other = SketchMod::new(ModelConfig::tiny(), 99).unwrap();
    other.save(&path, "stage2").unwrap();
    let later = std::time::SystemTime::now() + std::time::Duration::from_secs(5);
    std::fs::File::options()
        .write(true)
        .open(&path)
        .unwrap()
        .set_modified(later)
        .unwrap();
    assert!(slot.reload().unwrap());
    let second = slot.get().unwrap();
    assert_eq!(second.content_hash, other.content_hash());
    assert_eq!(second.stage, "stage2");
    // Holders of the old snapshot keep a usable model.
    assert_eq!(first.model.content_hash(), common::model().content_hash());

    std::fs::write(&path, b"not a checkpoint").unwrap();
    let later = later + std::time::Duration::from_secs(5);
    std::fs::File::options()
        .write(true)
        .open(&path)
        .unwrap()
        .set_modified(later)
        .unwrap();
    assert!(slot.reload().is_err());
    assert_eq!(slot.get().unwrap().content_hash, other.content_hash());
}
