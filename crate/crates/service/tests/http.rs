use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use searchgrid::api::router;
use searchgrid::session::{EpisodeStatus, Frame};
use searchgrid::store::SessionStore;
use searchgrid_core::raster::read_plane;
use searchgrid_core::scenario::{fuse_scenario, geographic_features, Scenario};
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;
use tower::ServiceExt;

fn minimal() -> Value {
    json!({"id": "mini", "grid": {"n_rows": 6, "n_cols": 8, "resolution": 10.0}})
}

fn valley() -> Value {
    json!({
        "id": "valley",
        "grid": {"n_rows": 8, "n_cols": 8, "resolution": 10.0},
        "layers": [
            {"feature_name": "trails", "geometries": [{"kind": "polyline", "coords": [[0.0, 35.0], [80.0, 35.0]]}]},
            {"feature_name": "stream_lines", "geometries": [{"kind": "polyline", "coords": [[55.0, 0.0], [55.0, 80.0]]}]}
        ],
        "sketches": [{"name": "bend", "vertices": [[40.0, 40.0], [70.0, 40.0], [70.0, 70.0], [40.0, 70.0]]}],
        "inputs": {"priorities": ["trails", "stream_lines"]},
        "pomdp": {"b_max": 40, "n_particles": 400},
        "planner": {"n_simulations": 80, "max_depth": 15},
        "simulation": {"starts": [{"row": 0, "col": 0}], "truth": {"features": {"stream_lines": 2.0}, "concentration": 2.0}}
    })
}

fn app() -> Router {
    router(Arc::new(SessionStore::in_memory(None)))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |v| Body::from(v.to_string()));
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, scenario: Value) -> String {
    let (status, body) = call(app, Method::POST, "/sessions", Some(scenario)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session"].as_str().unwrap().to_string()
}

async fn control(app: &Router, id: &str, command: &str, body: Option<Value>) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/episode:{command}"), body).await
}

fn status_of(frame: &Value) -> EpisodeStatus {
    serde_json::from_value(frame["episode"].clone()).unwrap()
}

async fn mean_plane(app: &Router, id: &str) -> (Vec<f64>, Value) {
    let (status, raster) = call(app, Method::GET, &format!("/sessions/{id}/reward-map"), None).await;
    assert_eq!(status, StatusCode::OK);
    let grid = &raster["manifest"]["grid"];
    let (rows, cols) = (grid["n_rows"].as_u64().unwrap() as usize, grid["n_cols"].as_u64().unwrap() as usize);
    (read_plane(raster["mean"].as_str().unwrap().as_bytes(), rows, cols).unwrap(), raster)
}

#[tokio::test]
async fn minimal_scenario_has_all_zero_map() {
    let app = app();
    let id = create(&app, minimal()).await;
    let (mean, raster) = mean_plane(&app, &id).await;
    assert_eq!(mean.len(), 48);
    assert!(mean.iter().all(|&m| m == 0.0));
    assert_eq!(raster["manifest"]["row_order"], "south_to_north");
    let (status, grid) = call(&app, Method::GET, &format!("/sessions/{id}/grid"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(grid["revision"], 0);
    assert_eq!(grid["columns"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn schema_errors_are_rejected_with_paths() {
    let app = app();
    let mut bad = valley();
    bad["inputs"]["priorities"] = json!(["bridges"]);
    let (status, body) = call(&app, Method::POST, "/sessions", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["path"], "inputs.priorities[0]");
    assert!(body["message"].as_str().unwrap().contains("bridges"));

    let mut bad = valley();
    bad["grid"]["n_rows"] = json!("eight");
    let (status, body) = call(&app, Method::POST, "/sessions", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "schema");
    assert_eq!(body["path"], "grid.n_rows");
}

#[tokio::test]
async fn reingesting_hits_the_feature_cache() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(SessionStore::in_memory(Some(dir.path().to_path_buf()))));
    let (_, first) = call(&app, Method::POST, "/sessions", Some(valley())).await;
    let (_, second) = call(&app, Method::POST, "/sessions", Some(valley())).await;
    assert_eq!(first["cache"], "miss");
    assert_eq!(second["cache"], "hit");
    let a = mean_plane(&app, first["session"].as_str().unwrap()).await.0;
    let b = mean_plane(&app, second["session"].as_str().unwrap()).await.0;
    assert_eq!(a, b);
}

#[tokio::test]
async fn observation_adds_exactly_one_column() {
    let app = app();
    let id = create(&app, valley()).await;
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{id}/grid"), None).await;
    let delta = json!({
        "sketches": [{"name": "pool", "vertices": [[0.0, 60.0], [20.0, 60.0], [20.0, 80.0], [0.0, 80.0]]}],
        "observations": [{"sketch": "pool", "label": "near"}]
    });
    let (status, fit) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(delta)).await;
    assert_eq!(status, StatusCode::OK, "{fit}");
    assert_eq!(fit["revision"], 1);
    assert_eq!(fit["n_psi"], 1);
    assert_eq!(fit["columns"].as_array().unwrap().len(), before["columns"].as_array().unwrap().len() + 1);
    let (_, fit) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({"observations": [{"sketch": "bend", "label": "inside"}]}))).await;
    assert_eq!(fit["n_psi"], 2);

    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({"observations": [{"sketch": "ghost", "label": "inside"}]}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["message"].as_str().unwrap().contains("unknown sketch"));
    let (_, grid) = call(&app, Method::GET, &format!("/sessions/{id}/grid"), None).await;
    assert_eq!(grid["revision"], 2);
}

#[tokio::test]
async fn empty_delta_bumps_revision_and_keeps_map() {
    let app = app();
    let id = create(&app, valley()).await;
    let (_, before) = mean_plane(&app, &id).await;
    let (status, fit) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fit["revision"], 1);
    let (_, after) = mean_plane(&app, &id).await;
    assert_eq!(before["mean"], after["mean"]);
    assert_eq!(before["variance"], after["variance"]);
    assert_eq!(after["revision"], 1);
}

#[tokio::test]
async fn avoid_waypoint_lowers_that_cell() {
    let app = app();
    let id = create(&app, valley()).await;
    let (mean, _) = mean_plane(&app, &id).await;
    let hot = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    let (row, col) = (hot / 8, hot % 8);
    let point = [col as f64 * 10.0 + 5.0, row as f64 * 10.0 + 5.0];
    control(&app, &id, "start", None).await;
    let (status, fit) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({"waypoints": {"avoid": [point]}}))).await;
    assert_eq!(status, StatusCode::OK, "{fit}");
    let (after, _) = mean_plane(&app, &id).await;
    assert!(after[hot] < mean[hot], "{} -> {}", mean[hot], after[hot]);

    // independent refit of the same inputs through the library
    let mut s = Scenario::from_value(valley()).unwrap();
    s.inputs.waypoints.avoid.push(searchgrid_core::geometry::Vec2::new(point[0], point[1]));
    let (phi, _) = geographic_features(&s, None).unwrap();
    assert_eq!(fuse_scenario(&s, &phi).unwrap().map.mean, after);

    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({"waypoints": {"visit": [point]}}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn reset_matches_a_fresh_start() {
    let app = app();
    let id = create(&app, valley()).await;
    let (status, started) = control(&app, &id, "start", Some(json!({"agent": "pomcp", "seed": 4}))).await;
    assert_eq!(status, StatusCode::OK, "{started}");
    for _ in 0..4 {
        control(&app, &id, "step", None).await;
    }
    let (status, reset) = control(&app, &id, "reset", None).await;
    assert_eq!(status, StatusCode::OK);
    let (fresh, again) = (status_of(&started), status_of(&reset));
    assert_eq!(again.t, 0);
    assert!(again.paused);
    assert_eq!(EpisodeStatus { paused: false, ..again }, fresh);

    let (status, body) = control(&app, &id, "start", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let (status, body) = control(&app, &id, "start", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "episode_running");
}

#[tokio::test]
async fn step_on_terminal_episode_is_unchanged() {
    let app = app();
    let id = create(&app, valley()).await;
    let body = json!({"agent": "baseline", "start": {"row": 0, "col": 0}, "target": {"row": 0, "col": 2}});
    let (_, frame) = control(&app, &id, "start", Some(body)).await;
    let mut last = status_of(&frame);
    for _ in 0..200 {
        if last.terminal {
            break;
        }
        last = status_of(&control(&app, &id, "step", None).await.1);
    }
    assert!(last.terminal);
    assert!(last.outcome.is_some());
    let (status, frame) = control(&app, &id, "step", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(status_of(&frame), last);
}

#[tokio::test]
async fn same_seed_sessions_produce_identical_frames() {
    let app = app();
    let a = create(&app, valley()).await;
    let b = create(&app, valley()).await;
    let start = json!({"agent": "pomcp", "seed": 11});
    let (_, fa) = control(&app, &a, "start", Some(start.clone())).await;
    let (_, fb) = control(&app, &b, "start", Some(start)).await;
    assert_eq!(status_of(&fa), status_of(&fb));
    for _ in 0..6 {
        let (_, fa) = control(&app, &a, "step", None).await;
        let (_, fb) = control(&app, &b, "step", None).await;
        assert_eq!(status_of(&fa), status_of(&fb));
        assert_eq!(fa["seq"], fb["seq"]);
    }
}

#[tokio::test]
async fn step_without_start_is_an_error() {
    let app = app();
    let id = create(&app, valley()).await;
    let (status, body) = control(&app, &id, "step", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_episode");
    let (status, _) = control(&app, &id, "rewind", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/sessions/nope/grid", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

async fn next_frame(body: &mut Body, buf: &mut Vec<u8>) -> Frame {
    loop {
        if let Some(pos) = buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = buf.drain(..=pos).collect();
            return serde_json::from_slice(&line).unwrap();
        }
        let frame = tokio::time::timeout(Duration::from_secs(30), body.frame()).await.expect("frame in time").unwrap().unwrap();
        buf.extend_from_slice(&frame.into_data().unwrap());
    }
}

#[tokio::test]
async fn stream_carries_one_frame_per_event() {
    let app = app();
    let id = create(&app, valley()).await;
    let req = Request::get(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.headers()["content-type"], "application/x-ndjson");
    let mut body = res.into_body();
    let mut buf = Vec::new();
    let first = next_frame(&mut body, &mut buf).await;
    assert!(first.episode.is_none());

    let (_, started) = control(&app, &id, "start", None).await;
    let mut replies = vec![started];
    for _ in 0..10 {
        replies.push(control(&app, &id, "step", None).await.1);
    }
    call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({}))).await;
    for reply in &replies {
        let frame = next_frame(&mut body, &mut buf).await;
        assert_eq!(serde_json::to_value(&frame).unwrap(), *reply);
    }
    let inputs = next_frame(&mut body, &mut buf).await;
    assert_eq!(inputs.revision, 1);
    assert_eq!(inputs.seq, 12 + first.seq);
}

#[tokio::test]
async fn autoplay_runs_until_paused() {
    let app = app();
    let id = create(&app, valley()).await;
    let req = Request::get(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let mut body = app.clone().oneshot(req).await.unwrap().into_body();
    let mut buf = Vec::new();
    next_frame(&mut body, &mut buf).await;
    control(&app, &id, "start", Some(json!({"agent": "baseline", "target": {"row": 7, "col": 7}, "autoplay_ms": 1}))).await;
    let mut seen = Vec::new();
    while seen.len() < 3 {
        let f = next_frame(&mut body, &mut buf).await;
        if f.event == searchgrid::session::FrameEvent::Step {
            seen.push(f);
        }
    }
    let (_, paused) = control(&app, &id, "pause", None).await;
    let t = status_of(&paused).t;
    tokio::time::sleep(Duration::from_millis(50)).await;
    let (_, grid) = call(&app, Method::GET, &format!("/sessions/{id}/grid"), None).await;
    assert_eq!(grid["revision"], 0);
    let (_, stepped) = control(&app, &id, "step", None).await;
    assert_eq!(status_of(&stepped).t, t + 1);
}

#[tokio::test]
async fn restart_restores_identical_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (id, mean, variance) = {
        let app = router(Arc::new(SessionStore::open(dir.path().to_path_buf(), None).unwrap()));
        let id = create(&app, valley()).await;
        call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({"observations": [{"sketch": "bend", "label": "inside"}], "waypoints": {"avoid": [[5.0, 75.0]]}}))).await;
        call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({}))).await;
        let (_, raster) = mean_plane(&app, &id).await;
        (id, raster["mean"].clone(), raster["variance"].clone())
    };
    let app = router(Arc::new(SessionStore::open(dir.path().to_path_buf(), None).unwrap()));
    let (_, raster) = mean_plane(&app, &id).await;
    assert_eq!(raster["revision"], 2);
    assert_eq!(raster["mean"], mean);
    assert_eq!(raster["variance"], variance);
    let (_, ids) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(ids, json!([id]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submits_serialize() {
    let app = app();
    let id = create(&app, valley()).await;
    let points: Vec<[f64; 2]> = (0..8).map(|k| [k as f64 * 10.0 + 5.0, 75.0]).collect();
    let tasks: Vec<_> = points
        .iter()
        .map(|p| {
            let app = app.clone();
            let uri = format!("/sessions/{id}/inputs");
            let body = json!({"waypoints": {"visit": [p]}});
            tokio::spawn(async move { call(&app, Method::POST, &uri, Some(body)).await })
        })
        .collect();
    let mut revisions = Vec::new();
    for t in tasks {
        let (status, fit) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        revisions.push(fit["revision"].as_u64().unwrap());
    }
    revisions.sort();
    assert_eq!(revisions, (1..=8).collect::<Vec<_>>());
    let (_, fit) = call(&app, Method::POST, &format!("/sessions/{id}/inputs"), Some(json!({}))).await;
    assert_eq!(fit["n_visit"], 8);
    assert_eq!(fit["revision"], 9);
}
