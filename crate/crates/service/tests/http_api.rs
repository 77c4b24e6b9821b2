use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use virotem::classical::{propose_candidates, ProposalParams};
use virotem::raster::{decode_png, read_mask, write_image, Circle, LabelMask};
use virotem::synthgen::{generate_scene, read_circles, SceneSpec};
use virotem_service::server::{router, AppState, ServerConfig};

struct Fixture {
    dir: tempfile::TempDir,
    app: Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let spec = SceneSpec { width: 256, height: 192, n_intact: 4, n_large_debris: 1, seed: 11, ..SceneSpec::default() };
    let (img, _) = generate_scene(&spec).unwrap();
    write_image(&img, images.join("scene.pgm")).unwrap();
    let app = router(AppState::new(config(dir.path())).unwrap());
    Fixture { dir, app }
}

fn config(root: &Path) -> ServerConfig {
    ServerConfig {
        image_dir: root.join("images"),
        snapshot_dir: Some(root.join("snapshots")),
        export_dir: root.join("exports"),
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (s, v) = call_json(app, Method::POST, "/sessions", Some(json!({ "image": "scene" }))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["revision"], 0);
    v["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn add_delete_export() {
    let f = fixture();
    let id = new_session(&f.app).await;
    let circles = [(30.0, 40.0, 12.0), (100.0, 90.0, 15.0), (200.0, 150.0, 10.0)];
    let mut ids = Vec::new();
    for (rev, (cx, cy, r)) in circles.iter().enumerate() {
        let (s, v) = call_json(
            &f.app,
            Method::POST,
            &format!("/sessions/{id}/circles"),
            Some(json!({ "revision": rev, "cx": cx, "cy": cy, "r": r })),
        )
        .await;
        assert_eq!(s, StatusCode::CREATED);
        ids.push(v["circles"][rev]["id"].as_u64().unwrap());
        assert_eq!(v["circles"][rev]["provenance"], "manual");
    }
    let (s, v) =
        call_json(&f.app, Method::DELETE, &format!("/sessions/{id}/circles/{}", ids[1]), Some(json!({ "revision": 3 })))
            .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 4);

    let (s, v) = call_json(&f.app, Method::GET, &format!("/sessions/{id}/export"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["circles"].as_array().unwrap().len(), 2);
    let mask_path = v["mask_path"].as_str().unwrap().to_string();
    let kept = [Circle::new(30.0, 40.0, 12.0), Circle::new(200.0, 150.0, 10.0)];
    assert_eq!(read_mask(&mask_path).unwrap(), LabelMask::from_circles(256, 192, &kept).unwrap());
    assert_eq!(read_circles(v["circles_path"].as_str().unwrap()).unwrap(), kept.to_vec());

    // identical state, identical bytes
    let first = std::fs::read(&mask_path).unwrap();
    let (_, again) = call_json(&f.app, Method::GET, &format!("/sessions/{id}/export"), None).await;
    assert_eq!(std::fs::read(again["mask_path"].as_str().unwrap()).unwrap(), first);
}

#[tokio::test]
async fn propose_matches_library() {
    let f = fixture();
    let id = new_session(&f.app).await;
    let (s, v) =
        call_json(&f.app, Method::POST, &format!("/sessions/{id}/propose"), Some(json!({ "revision": 0 }))).await;
    assert_eq!(s, StatusCode::OK);
    let img = virotem::raster::read_image(f.dir.path().join("images/scene.pgm")).unwrap();
    let want = propose_candidates(&img, &ProposalParams::default()).unwrap();
    let got = v["circles"].as_array().unwrap();
    assert_eq!(got.len(), want.len());
    assert!(!want.is_empty());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g["provenance"], "auto");
        assert_eq!((g["cx"].as_f64().unwrap(), g["cy"].as_f64().unwrap(), g["r"].as_f64().unwrap()), (w.cx, w.cy, w.r));
    }
    assert_eq!(v["revision"], 1);
}

#[tokio::test]
async fn stale_delete_conflicts() {
    let f = fixture();
    let id = new_session(&f.app).await;
    call_json(&f.app, Method::POST, &format!("/sessions/{id}/circles"), Some(json!({ "revision": 0, "cx": 50, "cy": 50, "r": 10 })))
        .await;
    let uri = format!("/sessions/{id}/circles/1");
    let a = call_json(&f.app, Method::DELETE, &uri, Some(json!({ "revision": 1 })));
    let b = call_json(&f.app, Method::DELETE, &uri, Some(json!({ "revision": 1 })));
    let ((sa, _), (sb, vb)) = tokio::join!(a, b);
    let mut statuses = [sa, sb];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let conflict = if sb == StatusCode::CONFLICT { vb } else { call_json(&f.app, Method::DELETE, &uri, Some(json!({ "revision": 1 }))).await.1 };
    assert_eq!(conflict["error"], "conflict");
    assert_eq!(conflict["session"]["revision"], 2);
    assert!(conflict["session"]["circles"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn patch_moves_and_resizes() {
    let f = fixture();
    let id = new_session(&f.app).await;
    call_json(&f.app, Method::POST, &format!("/sessions/{id}/circles"), Some(json!({ "revision": 0, "cx": 50, "cy": 50, "r": 10 })))
        .await;
    let uri = format!("/sessions/{id}/circles/1");
    let (s, v) = call_json(&f.app, Method::PATCH, &uri, Some(json!({ "revision": 1, "cx": 60.5 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["circles"][0]["cx"].as_f64(), v["circles"][0]["r"].as_f64()), (Some(60.5), Some(10.0)));
    let (s, _) = call_json(&f.app, Method::PATCH, &uri, Some(json!({ "revision": 2, "r": 14 }))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call_json(&f.app, Method::PATCH, &uri, Some(json!({ "revision": 3, "cx": 999 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "invalid");
    let (s, _) = call_json(&f.app, Method::PATCH, &format!("/sessions/{id}/circles/77"), Some(json!({ "revision": 3 }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn errors_and_images() {
    let f = fixture();
    let (s, _) = call_json(&f.app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&f.app, Method::POST, "/sessions", Some(json!({ "image": "missing" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&f.app, Method::POST, "/sessions", Some(json!({ "image": "../images/scene" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = new_session(&f.app).await;
    let (s, _) = call_json(&f.app, Method::POST, &format!("/sessions/{id}/circles"), Some(json!({ "revision": 0, "cx": -5, "cy": 5, "r": 3 })))
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, bytes) = call(&f.app, Method::GET, "/images/scene.png", None).await;
    assert_eq!(s, StatusCode::OK);
    let png = decode_png(&bytes).unwrap();
    assert_eq!((png.width(), png.height()), (256, 192));
    let (_, list) = call_json(&f.app, Method::GET, "/images", None).await;
    assert_eq!(list, json!(["scene"]));
}

#[tokio::test]
async fn snapshots_survive_restart() {
    let f = fixture();
    let id = new_session(&f.app).await;
    call_json(&f.app, Method::POST, &format!("/sessions/{id}/circles"), Some(json!({ "revision": 0, "cx": 50, "cy": 50, "r": 10 })))
        .await;
    let (_, before) = call_json(&f.app, Method::GET, &format!("/sessions/{id}"), None).await;

    let app2 = router(AppState::new(config(f.dir.path())).unwrap());
    let (s, after) = call_json(&app2, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(before, after);
    // new ids do not collide with restored ones
    let id2 = new_session(&app2).await;
    assert_ne!(id, id2);
}
