use std::collections::HashMap;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use frugalnn::cbctree::{self, TreeParams};
use frugalnn::cluster::{kmeans, partial_distance};
use frugalnn::data::{normalize, CostSchedule, Dataset};
use frugalnn::dqn::QNetwork;
use frugalnn::eval::knn_retrieve;
use frugalnn::FeatureSet;
use frugalnn_advisor::{router, AppState, ModelBundle, Policy, SessionView, DEFAULT_TTL};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Feature 0 separates two groups of points; feature 1 is noise.
fn oracle_data() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = (0..60)
        .map(|i| {
            let side = if i % 2 == 0 { 0.0 } else { 10.0 };
            vec![side + rng.gen_range(0.0..1.0), rng.gen_range(0.0..10.0)]
        })
        .collect();
    Dataset::new(vec!["signal".into(), "noise".into()], rows).unwrap()
}

fn bundle(raw: &Dataset, schedule: CostSchedule, dqn: bool) -> ModelBundle {
    let train = normalize(raw).unwrap();
    let clustering = kmeans(&train, 2, 0).unwrap();
    let policy = if dqn {
        Policy::Dqn(QNetwork::new(train.n_features() + 1, &[8], train.n_features() + 1, 3))
    } else {
        Policy::Tree(cbctree::build(&train, &schedule, TreeParams::default()).unwrap())
    };
    ModelBundle { normalization: train.normalization().cloned(), policy, train, clustering, schedule, k: 5 }
}

fn wide_data() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = (0..30).map(|_| (0..10).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    Dataset::from_rows(rows).unwrap()
}

fn app_with(ttl: Duration) -> (Router, AppState) {
    let raw = oracle_data();
    let mut models = HashMap::new();
    models.insert("tree".to_owned(), bundle(&raw, CostSchedule::new(vec![0.3, 0.3], vec![]).unwrap(), false));
    models.insert("dqn".to_owned(), bundle(&raw, CostSchedule::new(vec![0.3, 0.3], vec![]).unwrap(), true));
    models.insert("grouped".to_owned(), bundle(&raw, CostSchedule::new(vec![0.3, 0.3], vec![vec![0, 1]]).unwrap(), false));
    models.insert("wide".to_owned(), bundle(&wide_data(), CostSchedule::uniform(10), false));
    let state = AppState::new(models, ttl);
    (router(state.clone(), None), state)
}

fn app() -> (Router, AppState) {
    app_with(DEFAULT_TTL)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let request = match body {
        Some(b) => request.body(Body::from(b.to_string())).unwrap(),
        None => request.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, model: &str, budget: f64) -> SessionView {
    let (status, body) = call(app, Method::POST, "/sessions", Some(json!({"model": model, "budget": budget}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    serde_json::from_value(body).unwrap()
}

async fn reveal(app: &Router, id: &str, feature: &str, value: f64) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/reveal"), Some(json!({"feature": feature, "value": value}))).await
}

#[tokio::test]
async fn create_echoes_schedule_and_ids_are_distinct() {
    let (app, _) = app();
    let a = create(&app, "wide", 0.5).await;
    let b = create(&app, "wide", 0.5).await;
    assert_ne!(a.id, b.id);
    assert_eq!(a.features.len(), 10);
    assert!(a.features.iter().all(|f| (f.cost - 0.1).abs() < 1e-15));
    assert_eq!(a.advice.remaining_budget, 0.5);
    assert!(a.advice.revealed.is_empty());
    assert_eq!(a.advice.cluster_ranking.len(), 2);
}

#[tokio::test]
async fn bad_creates_are_rejected() {
    let (app, _) = app();
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"model": "tree", "budget": 0.0}))).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_budget")));
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"model": "nope", "budget": 0.5}))).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_model")));
}

#[tokio::test]
async fn first_suggestion_is_the_informative_feature() {
    let (app, _) = app();
    let s = create(&app, "tree", 1.0).await;
    assert_eq!(serde_json::to_value(&s.advice.suggestion).unwrap(), json!({"action": "reveal", "feature": "signal"}));
}

#[tokio::test]
async fn suggestion_moves_on_and_ends_with_terminate() {
    let (app, _) = app();
    let s = create(&app, "tree", 0.6).await;
    let (status, body) = reveal(&app, &s.id, "signal", 10.4).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let v: SessionView = serde_json::from_value(body).unwrap();
    assert_ne!(serde_json::to_value(&v.advice.suggestion).unwrap()["feature"], "signal");
    assert!((v.advice.remaining_budget - 0.3).abs() < 1e-12);

    let (status, body) = reveal(&app, &s.id, "noise", 3.0).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["suggestion"], json!({"action": "terminate"}));
    assert_eq!(body["revealed"], json!(["signal", "noise"]));
}

#[tokio::test]
async fn dqn_sessions_follow_masked_argmax() {
    let (app, state) = app();
    let s = create(&app, "dqn", 0.3).await;
    let bundle = state.model("dqn").unwrap();
    let Policy::Dqn(net) = &bundle.policy else { unreachable!() };
    let q = net.forward(&[0.0, 0.0, 0.0]);
    let expected = frugalnn::dqn::masked_argmax(&q, &[true, true, true]);
    let names = ["signal", "noise"];
    match expected {
        2 => assert_eq!(s.advice.suggestion, frugalnn_advisor::Suggestion::Terminate),
        f => assert_eq!(s.advice.suggestion, frugalnn_advisor::Suggestion::Reveal { feature: names[f].into() }),
    }
    assert_eq!(s.advice.predicted_cluster.source, "kmeans");
    let (_, body) = reveal(&app, &s.id, "noise", 1.0).await;
    // Budget gone: only terminate is left.
    assert_eq!(body["suggestion"], json!({"action": "terminate"}));
}

#[tokio::test]
async fn advice_matches_direct_library_calls() {
    let (app, state) = app();
    let s = create(&app, "tree", 1.0).await;
    let (_, body) = reveal(&app, &s.id, "signal", 0.7).await;
    let v: SessionView = serde_json::from_value(body).unwrap();

    let bundle = state.model("tree").unwrap();
    let Policy::Tree(tree) = &bundle.policy else { unreachable!() };
    let norm = bundle.normalization.as_ref().unwrap();
    let p = vec![norm.normalize_value(0, 0.7), 0.0];
    let known = FeatureSet::from_indices(2, [0]);
    let node = tree.predict_cluster(&bundle.train, &p, &known);
    assert_eq!((v.advice.predicted_cluster.id, v.advice.predicted_cluster.size), (node.id, node.size()));
    let ids = knn_retrieve(&bundle.train, &p, &known, 5, Some(&node.points));
    assert_eq!(v.advice.neighbors.iter().map(|n| n.id).collect::<Vec<_>>(), ids);
    for n in &v.advice.neighbors {
        assert_eq!(n.distance, partial_distance(&p, bundle.train.row(n.id), &known));
    }
    let ranking = bundle.clustering.rank(&p, &known);
    assert_eq!(ranking.0[v.advice.cluster_ranking[0]], 1);
}

#[tokio::test]
async fn fresh_session_neighbors_follow_the_tie_rule() {
    let (app, _) = app();
    let s = create(&app, "dqn", 0.5).await;
    let ids: Vec<usize> = s.advice.neighbors.iter().map(|n| n.id).collect();
    assert_eq!(ids, [0, 1, 2, 3, 4]);
    assert!(s.advice.neighbors.iter().all(|n| n.distance == 0.0));
}

#[tokio::test]
async fn reads_are_idempotent() {
    let (app, _) = app();
    let s = create(&app, "tree", 1.0).await;
    reveal(&app, &s.id, "noise", 5.0).await;
    let uri = format!("/sessions/{}", s.id);
    let (_, first) = call(&app, Method::GET, &uri, None).await;
    let (_, second) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(first, second);
    assert_eq!(first["history"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn reveal_errors_have_codes() {
    let (app, _) = app();
    let s = create(&app, "tree", 0.3).await;
    let (status, body) = reveal(&app, &s.id, "colour", 1.0).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::BAD_REQUEST, Some("unknown_feature")));
    reveal(&app, &s.id, "signal", 1.0).await;
    let (status, body) = reveal(&app, &s.id, "signal", 1.0).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::CONFLICT, Some("already_revealed")));
    let (status, body) = reveal(&app, &s.id, "noise", 1.0).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::CONFLICT, Some("unaffordable")));
    let (status, body) = reveal(&app, "missing", "noise", 1.0).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
    assert!(body["message"].is_string());
}

#[tokio::test]
async fn terminate_and_delete() {
    let (app, state) = app();
    let s = create(&app, "tree", 1.0).await;
    let (status, body) = call(&app, Method::POST, &format!("/sessions/{}/terminate", s.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((body["finished"].as_bool(), &body["suggestion"]), (Some(true), &json!({"action": "terminate"})));
    let (status, body) = reveal(&app, &s.id, "signal", 1.0).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::CONFLICT, Some("session_finished")));

    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{}", s.id), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(state.session_count(), 0);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{}", s.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let (app, _) = app();
    let a = create(&app, "tree", 1.0).await;
    let b = create(&app, "tree", 1.0).await;
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{}", b.id), None).await;
    reveal(&app, &a.id, "signal", 0.1).await;
    reveal(&app, &a.id, "noise", 9.0).await;
    let (_, after) = call(&app, Method::GET, &format!("/sessions/{}", b.id), None).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn group_members_are_free_but_need_values() {
    let (app, _) = app();
    let s = create(&app, "grouped", 0.3).await;
    let (_, body) = reveal(&app, &s.id, "noise", 4.0).await;
    assert_eq!(body["revealed"], json!(["signal", "noise"]));
    assert_eq!(body["pending"], json!(["signal"]));
    assert!((body["remaining_budget"].as_f64().unwrap()).abs() < 1e-12);
    // Pending values only enter distances once supplied.
    assert!(body["neighbors"].as_array().unwrap().iter().any(|n| n["distance"].as_f64().unwrap() > 0.0));

    let (status, body) = reveal(&app, &s.id, "signal", 10.2).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["pending"], json!([]));
    assert_eq!(body["history"][1]["charged"], json!(0.0));
}

#[tokio::test]
async fn history_replay_reconstructs_the_session() {
    let (app, state) = app();
    let s = create(&app, "grouped", 0.7).await;
    reveal(&app, &s.id, "signal", 0.4).await;
    reveal(&app, &s.id, "noise", 6.0).await;
    let (_, body) = call(&app, Method::POST, &format!("/sessions/{}/terminate", s.id), None).await;
    let live: SessionView = serde_json::from_value(body).unwrap();

    let bundle = state.model("grouped").unwrap();
    let replayed =
        frugalnn_advisor::Session::replay(s.id.clone(), "grouped".into(), &bundle, 0.7, &live.history).unwrap();
    assert_eq!(replayed.advice(&bundle), live.advice);
    assert_eq!(replayed.history(), live.history.as_slice());
}

#[tokio::test]
async fn raw_values_are_clamped_to_training_range() {
    let (app, _) = app();
    let a = create(&app, "tree", 1.0).await;
    let b = create(&app, "tree", 1.0).await;
    let max = oracle_data().column(0).fold(f64::MIN, f64::max);
    let (_, high) = reveal(&app, &a.id, "signal", 1e6).await;
    let (_, edge) = reveal(&app, &b.id, "signal", max).await;
    assert_eq!(high["neighbors"], edge["neighbors"]);
}

#[tokio::test]
async fn expired_sessions_are_evicted() {
    let (app, state) = app_with(Duration::ZERO);
    let s = create(&app, "tree", 1.0).await;
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{}", s.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn ui_directory_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>advisor</h1>").unwrap();
    let (_, state) = app();
    let app = router(state, Some(dir.path().to_path_buf()));
    let response = app.oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<h1>advisor</h1>");
}

#[tokio::test]
async fn models_are_listed() {
    let (app, _) = app();
    let (_, body) = call(&app, Method::GET, "/models", None).await;
    assert_eq!(body, json!(["dqn", "grouped", "tree", "wide"]));
}
