use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use invexnet::checkpoint::{Checkpoint, Model};
use invexnet_service::{cors, router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn app() -> Router {
    router(AppState::new(), cors(None).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn cold_session(app: &Router) -> (String, Value) {
    let (status, body) = call(
        app,
        "POST",
        "/sessions",
        Some(json!({"dataset": "clusters5", "model": {"regions": 5, "train_steps": 0}, "grid": 40})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (body["session_id"].as_str().unwrap().to_string(), body["state"].clone())
}

#[tokio::test]
async fn create_returns_a_full_state() {
    let app = app();
    let (id, state) = cold_session(&app).await;
    assert_eq!(state["session_id"], id.as_str());
    assert_eq!(state["centers"].as_array().unwrap().len(), 5);
    assert_eq!(state["region_classes"].as_array().unwrap().len(), 5);
    assert_eq!(state["points"].as_array().unwrap().len(), 750);
    assert_eq!(state["region_raster"]["resolution"], json!([40, 40]));
    assert_eq!(state["class_raster"]["values"].as_array().unwrap().len(), 40);

    let (status, s) = call(&app, "GET", &format!("/sessions/{id}/state?grid=200"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["region_raster"]["resolution"], json!([200, 200]));
    assert_eq!(s["revision"], state["revision"]);

    let (_, capped) = call(&app, "GET", &format!("/sessions/{id}/state?grid=5000"), None).await;
    assert_eq!(capped["region_raster"]["resolution"], json!([400, 400]));
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/state?grid=1"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn bad_session_specs_are_400() {
    let app = app();
    let three_d = "a,b,c,label\n0,0,0,0\n1,1,1,1\n";
    for body in [
        json!({"dataset": "no_such_set"}),
        json!({"dataset": {"csv": three_d}}),
        json!({"dataset": "regression1"}),
        json!({"dataset": "clusters5", "model": {"regions": 0}}),
        json!({"dataset": "clusters5", "model": {"coeff": 1.5}}),
        json!({"dataset": "clusters5", "model": {"wings": 2}}),
    ] {
        let (status, err) = call(&app, "POST", "/sessions", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {err}");
        assert!(err["error"].is_string());
    }
    let req = Request::builder()
        .method("POST")
        .uri("/sessions")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn inline_csv_is_accepted() {
    let app = app();
    let mut csv = String::from("x,y,label\n");
    for i in 0..40 {
        let t = i as f64 / 40.0;
        csv.push_str(&format!("{},{},{}\n", t - 0.5, (i % 7) as f64 / 7.0, i % 2));
    }
    let (status, body) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"dataset": {"csv": csv}, "model": {"regions": 3, "train_steps": 0}, "grid": 8})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["state"]["points"].as_array().unwrap().len(), 40);
    assert_eq!(body["state"]["num_classes"], 2);
}

#[tokio::test]
async fn morph_add_remove_and_revision_checks() {
    let app = app();
    let (id, state) = cold_session(&app).await;
    let rev = state["revision"].as_u64().unwrap();
    let uri = format!("/sessions/{id}/morph");

    let (status, r) = call(&app, "POST", &uri, Some(json!({"op": "add", "x": -1.0, "y": -1.0, "class": 2, "expected_revision": rev}))).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["regions"], 6);
    assert_eq!(r["added_region"], 5);
    assert_eq!(r["revision"], rev + 1);

    // Stale revision: rejected, state untouched.
    let (status, err) = call(&app, "POST", &uri, Some(json!({"op": "remove", "region_id": 0, "expected_revision": rev}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["current_revision"], rev + 1);
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}/state?grid=4"), None).await;
    assert_eq!(s["regions"], 6);
    assert_eq!(s["revision"], rev + 1);
    assert_eq!(s["log"].as_array().unwrap().len(), 1);

    for bad in [
        json!({"op": "remove", "region_id": 99, "expected_revision": rev + 1}),
        json!({"op": "add", "x": 0.0, "y": 0.0, "class": 7, "expected_revision": rev + 1}),
        json!({"op": "finetune", "steps": 10, "expected_revision": rev + 1}),
        json!({"op": "jump", "expected_revision": rev + 1}),
        json!({"op": "add", "x": 0.0, "expected_revision": rev + 1}),
    ] {
        let (status, err) = call(&app, "POST", &uri, Some(bad.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad} -> {err}");
    }

    let (status, _) = call(&app, "POST", "/sessions/nope/morph", Some(json!({"op": "remove", "region_id": 0, "expected_revision": 0}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn removing_an_empty_region_keeps_predictions() {
    let app = app();
    let (id, state) = cold_session(&app).await;
    let before: Vec<Value> = state["class_raster"]["values"].as_array().unwrap().clone();
    let uri = format!("/sessions/{id}/morph");
    let rev = state["revision"].as_u64().unwrap();
    let (_, r) = call(&app, "POST", &uri, Some(json!({"op": "add", "x": 40.0, "y": 40.0, "class": 0, "expected_revision": rev}))).await;
    assert_eq!(r["reassigned"], 0, "{r}");
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}/state?grid=40"), None).await;
    let empty = s["reports"].as_array().unwrap().iter().find(|r| r["region_id"] == 5).unwrap().clone();
    assert_eq!(empty["num_points"], 0);
    let (status, r) = call(&app, "POST", &uri, Some(json!({"op": "remove", "region_id": 5, "expected_revision": rev + 1}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["reassigned"], 0);
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}/state?grid=40"), None).await;
    assert_eq!(s["class_raster"]["values"].as_array().unwrap(), &before);
}

#[tokio::test]
async fn train_validates_steps_and_bumps_revision() {
    let app = app();
    let (id, state) = cold_session(&app).await;
    let uri = format!("/sessions/{id}/train");
    for steps in [0, 50_001] {
        let (status, _) = call(&app, "POST", &uri, Some(json!({ "steps": steps }))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (status, r) = call(&app, "POST", &uri, Some(json!({"steps": 20}))).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert!(r["revision"].as_u64().unwrap() > state["revision"].as_u64().unwrap());
    assert!(r["accuracy_before"].is_number() && r["accuracy_after"].is_number());
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}/state?grid=4"), None).await;
    assert_eq!(s["revision"], r["revision"]);
    assert_eq!(s["log"], json!([{"op": "finetune", "steps": 20}]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_training_is_rejected() {
    let app = app();
    let (id, state) = cold_session(&app).await;
    let uri = format!("/sessions/{id}/train");
    let first = {
        let (app, uri) = (app.clone(), uri.clone());
        tokio::spawn(async move { call(&app, "POST", &uri, Some(json!({"steps": 1500}))).await })
    };
    tokio::time::sleep(Duration::from_millis(200)).await;
    let (status, _) = call(&app, "POST", &uri, Some(json!({"steps": 10}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let rev = state["revision"].as_u64().unwrap();
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/morph"),
        Some(json!({"op": "remove", "region_id": 0, "expected_revision": rev})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, r) = first.await.unwrap();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["revision"], rev + 1);
    let (status, _) = call(&app, "POST", &uri, Some(json!({"steps": 5}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn export_and_delete() {
    let app = app();
    let (id, _) = cold_session(&app).await;
    let (status, body) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["kind"], "multi_invex");
    let ckpt = Checkpoint::from_json(&body.to_string()).unwrap();
    assert!(matches!(ckpt.model, Model::MultiInvex(ref m) if m.state.num_regions() == 5));
    assert_eq!(ckpt.dataset.unwrap().name, "clusters5");

    let (_, ids) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(ids, json!([id.clone()]));
    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let app = router(AppState::new(), cors(Some("http://localhost:5173")).unwrap());
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

/// The manual morphism sequence driven entirely over HTTP.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn morphism_sequence_over_http_reaches_95_percent() {
    let app = app();
    let (status, created) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"dataset": "clusters5", "seed": 147, "model": {"regions": 5, "train_steps": 2000}, "grid": 20})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let id = created["session_id"].as_str().unwrap().to_string();
    let morph = format!("/sessions/{id}/morph");
    let train = format!("/sessions/{id}/train");
    let mut rev = created["state"]["revision"].as_u64().unwrap();

    for (x, y, class) in [(-1.0, -1.0, 2), (0.0, -1.0, 1)] {
        let (status, r) = call(&app, "POST", &morph, Some(json!({"op": "add", "x": x, "y": y, "class": class, "expected_revision": rev}))).await;
        assert_eq!(status, StatusCode::OK, "{r}");
        rev = r["revision"].as_u64().unwrap();
    }
    let (_, r) = call(&app, "POST", &train, Some(json!({"steps": 1000}))).await;
    rev = r["revision"].as_u64().unwrap();

    let (_, s) = call(&app, "GET", &format!("/sessions/{id}/state?grid=4"), None).await;
    let worst = s["reports"]
        .as_array()
        .unwrap()
        .iter()
        .min_by(|a, b| {
            let key = |r: &Value| (r["accuracy"].as_f64().unwrap_or(0.0), r["num_points"].as_u64().unwrap());
            key(a).partial_cmp(&key(b)).unwrap()
        })
        .unwrap()["region_id"]
        .clone();
    let (status, r) = call(&app, "POST", &morph, Some(json!({"op": "remove", "region_id": worst, "expected_revision": rev}))).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    let (_, r) = call(&app, "POST", &train, Some(json!({"steps": 1000}))).await;
    let acc = r["accuracy_after"].as_f64().unwrap();
    assert!(acc >= 0.95, "final hard accuracy {acc}");
}
