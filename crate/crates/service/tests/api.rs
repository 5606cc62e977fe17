use std::path::Path;
use std::time::{Duration, Instant};

use ace_core::config::Settings;
use ace_core::diffusion::{build_schedule, DenoiserArch, EpsDenoiser};
use ace_core::zoo::synthetic::GEOMETRY;
use ace_core::zoo::{ClassifierArch, PatchClassifier};
use ace_service::records::{RunRecord, RunRequest, RunStatus};
use ace_service::store::RunStore;
use ace_service::{start, ServiceConfig};
use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use candle_core::DType;
use serde_json::{json, Value};
use tower::ServiceExt;

fn settings() -> Settings {
    let mut s = Settings::default();
    s.dataset.train = 20;
    s.dataset.test = 10;
    s.explain.attack.num_iterations = 4;
    s.explain.attack.tau = 2;
    s.explain.attack.respacing = 10;
    s.explain.refine.dilation = 3;
    s.explain.diversity.respacings = vec![10, 20];
    s
}

fn write_models(dir: &Path) {
    let classifier =
        PatchClassifier::random(ClassifierArch::default(), GEOMETRY, vec!["frown".into(), "smile".into()], 5, DType::F32)
            .unwrap();
    classifier.save(dir.join("clf.ckpt")).unwrap();
    let schedule = build_schedule(100, "linear").unwrap();
    let arch = DenoiserArch { hidden: 16, depth: 1, time_dim: 8 };
    EpsDenoiser::random(arch, GEOMETRY, schedule, 9, DType::F32).unwrap().save(dir.join("ddpm.ckpt")).unwrap();
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder.header("content-type", "application/json").body(Body::from(v.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

struct Service {
    app: Router,
}

async fn service(root: &Path, queue_capacity: usize) -> Service {
    let config = ServiceConfig {
        data_root: root.to_path_buf(),
        queue_capacity,
        settings: settings(),
        ..Default::default()
    };
    let (_state, app) = start(config).unwrap();
    Service { app }
}

/// A fresh service with the two test models registered.
async fn fresh(root: &Path, queue_capacity: usize) -> Service {
    let src = root.join("incoming");
    std::fs::create_dir_all(&src).unwrap();
    write_models(&src);
    let s = service(root, queue_capacity).await;
    for (file, id, kind) in [("clf.ckpt", "clf", "classifier"), ("ddpm.ckpt", "ddpm", "denoiser")] {
        let (status, body) =
            json_call(&s.app, Method::POST, "/models", Some(json!({ "path": src.join(file), "id": id, "kind": kind }))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
    }
    s
}

fn request(index: usize, target: usize, seed: u64) -> Value {
    json!({
        "schema_version": 1,
        "classifier": "clf",
        "denoiser": "ddpm",
        "dataset": "synthetic",
        "split": "test",
        "index": index,
        "target": target,
        "seed": seed,
    })
}

/// Submits with whichever target differs from the prediction.
async fn submit_valid(app: &Router, index: usize, seed: u64) -> Value {
    for target in 0..2 {
        let (status, body) = json_call(app, Method::POST, "/runs", Some(request(index, target, seed))).await;
        if status == StatusCode::ACCEPTED {
            return body;
        }
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    panic!("both targets were rejected");
}

async fn wait_terminal(app: &Router, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(300);
    let mut last = RunStatus::Queued;
    loop {
        let (status, body) = json_call(app, Method::GET, &format!("/runs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let record: RunRecord = serde_json::from_value(body.clone()).unwrap();
        let via_running = last == RunStatus::Queued && RunStatus::Running.can_become(record.status);
        assert!(record.status == last || last.can_become(record.status) || via_running, "{last} -> {}", record.status);
        last = record.status;
        if record.status.is_terminal() {
            return body;
        }
        assert!(Instant::now() < deadline, "run {id} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn submission_rejection_and_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let s = fresh(dir.path(), 16).await;

    let mut outcomes = Vec::new();
    for target in 0..2 {
        outcomes.push(json_call(&s.app, Method::POST, "/runs", Some(request(0, target, 1))).await);
    }
    let rejected: Vec<_> = outcomes.iter().filter(|(st, _)| *st == StatusCode::UNPROCESSABLE_ENTITY).collect();
    let accepted: Vec<_> = outcomes.iter().filter(|(st, _)| *st == StatusCode::ACCEPTED).collect();
    assert_eq!((rejected.len(), accepted.len()), (1, 1));
    let rejected = &rejected[0].1;
    assert_eq!(rejected["status"], "rejected");
    assert_eq!(rejected["reason"], "target equals prediction");
    assert_eq!(accepted[0].1["status"], "queued");
    assert!(accepted[0].1.get("artifacts").is_none());

    let (_, again) = json_call(&s.app, Method::GET, &format!("/runs/{}", rejected["id"].as_str().unwrap()), None).await;
    assert_eq!(again["status"], "rejected");

    let a = submit_valid(&s.app, 1, 3).await;
    let b = submit_valid(&s.app, 1, 3).await;
    assert_ne!(a["id"], b["id"]);
    assert!(a["id"].as_str().unwrap() < b["id"].as_str().unwrap());

    let (status, body) = json_call(&s.app, Method::GET, "/runs/run-0000000000000-0000", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not-found");

    let mut bad = request(0, 1, 0);
    bad["classifier"] = json!("missing");
    let (status, _) = json_call(&s.app, Method::POST, "/runs", Some(bad)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let mut bad = request(0, 1, 0);
    bad["config"] = json!({ "attack": { "tau": 50 }, "refine": { "dilation": 4 } });
    let (status, body) = json_call(&s.app, Method::POST, "/runs", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let mut bad = request(0, 1, 0);
    bad["schema_version"] = json!(99);
    let (status, _) = json_call(&s.app, Method::POST, "/runs", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    for id in [&a["id"], &b["id"]] {
        wait_terminal(&s.app, id.as_str().unwrap()).await;
    }
    let (_, listed) = json_call(&s.app, Method::GET, "/runs?status=rejected", None).await;
    assert_eq!(listed["runs"].as_array().unwrap().len(), 1);
    let (status, _) = json_call(&s.app, Method::GET, "/runs?status=bogus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn succeeded_runs_expose_artifacts_events_and_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let s = fresh(dir.path(), 16).await;
        let queued = submit_valid(&s.app, 2, 4).await;
        let id = queued["id"].as_str().unwrap().to_string();

        let (status, bytes) = call(&s.app, Method::GET, &format!("/runs/{id}/events"), None).await;
        assert_eq!(status, StatusCode::OK);
        let text = String::from_utf8(bytes).unwrap();
        let progress = text.matches("event: progress").count();
        assert_eq!(progress, 4, "{text}");
        let last_data = text.lines().filter(|l| l.starts_with("data:")).last().unwrap();
        let last: Value = serde_json::from_str(last_data.trim_start_matches("data:").trim()).unwrap();
        assert_eq!(last["event"], "status");
        assert_eq!(last["status"], "succeeded");

        let record = wait_terminal(&s.app, &id).await;
        assert_eq!(record["status"], "succeeded", "{record}");
        let artifacts = record["artifacts"].as_object().unwrap();
        let mut names: Vec<_> = artifacts.keys().cloned().collect();
        names.sort();
        assert_eq!(names, ["counterfactual", "input", "mask", "pre_explanation"]);
        let summary = &record["summary"];
        assert_eq!(summary["input_probs"].as_array().unwrap().len(), 2);
        assert_eq!(summary["objective_trace"].as_array().unwrap().len(), 4);
        for url in artifacts.values() {
            let (status, png) = call(&s.app, Method::GET, url.as_str().unwrap(), None).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(&png[..4], b"\x89PNG");
        }
        let (status, _) = call(&s.app, Method::GET, &format!("/runs/{id}/artifacts/nope"), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        id
    };

    let mut store = RunStore::open(dir.path().join("runs")).unwrap();
    let pending = RunRecord::new(
        store.next_id(),
        serde_json::from_value::<RunRequest>(request(0, 0, 0)).unwrap(),
        None,
    );
    let pending_id = pending.id.clone();
    store.insert(pending).unwrap();
    store.update(&pending_id, |r| r.status = RunStatus::Running).unwrap();
    drop(store);
    store = RunStore::open(dir.path().join("runs")).unwrap();
    assert_eq!(store.get(&pending_id).unwrap().reason.as_deref(), Some("interrupted"));
    drop(store);

    let s = service(dir.path(), 16).await;
    let (_, record) = json_call(&s.app, Method::GET, &format!("/runs/{id}"), None).await;
    assert_eq!(record["status"], "succeeded");
    let (status, png) = call(&s.app, Method::GET, &format!("/runs/{id}/artifacts/counterfactual"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");
    let (_, record) = json_call(&s.app, Method::GET, &format!("/runs/{pending_id}"), None).await;
    assert_eq!(record["status"], "failed");
    assert_eq!(record["reason"], "interrupted");
    let (status, bytes) = call(&s.app, Method::GET, &format!("/runs/{pending_id}/events"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(bytes).unwrap().contains("interrupted"));
    let (_, models) = json_call(&s.app, Method::GET, "/models", None).await;
    assert_eq!(models["models"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn batches_are_deterministic_and_itemize_failures() {
    let dir = tempfile::tempdir().unwrap();
    let s = fresh(dir.path(), 16).await;
    let mut ids = Vec::new();
    for index in 0..3 {
        let r = submit_valid(&s.app, index, 10 + index as u64).await;
        ids.push(r["id"].as_str().unwrap().to_string());
    }
    let mut flipped = 0;
    for id in &ids {
        let r = wait_terminal(&s.app, id).await;
        assert_eq!(r["status"], "succeeded");
        flipped += usize::from(r["summary"]["flipped"].as_bool().unwrap());
    }
    let batch = json!({ "run_ids": ids, "metrics": ["flip-rate", "cout"], "seed": 7 });
    let (status, first) = json_call(&s.app, Method::POST, "/batches/evaluate", Some(batch.clone())).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    let (_, second) = json_call(&s.app, Method::POST, "/batches/evaluate", Some(batch)).await;
    assert_eq!(first["report"], second["report"]);
    assert_ne!(first["id"], second["id"]);
    assert_eq!(first["report"]["flip_rate"].as_f64().unwrap(), flipped as f64 / 3.0);

    let (status, stored) = json_call(&s.app, Method::GET, &format!("/batches/{}", first["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stored["report"], first["report"]);
    let (_, record) = json_call(&s.app, Method::GET, &format!("/runs/{}", ids[0]), None).await;
    assert!(record["metrics"].get(first["id"].as_str().unwrap()).is_some());

    let (status, by_split) = json_call(
        &s.app,
        Method::POST,
        "/batches/evaluate",
        Some(json!({ "dataset": "synthetic", "split": "test", "metrics": "flip-rate", "seed": 7 })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(by_split["run_ids"].as_array().unwrap().len(), 3);

    let (st, rejected) = json_call(&s.app, Method::POST, "/runs", Some(request(0, 0, 0))).await;
    let (st2, other) = json_call(&s.app, Method::POST, "/runs", Some(request(0, 1, 0))).await;
    let (bad_id, good_id) = if st == StatusCode::UNPROCESSABLE_ENTITY { (rejected, other) } else { (other, rejected) };
    assert!(st != st2);
    wait_terminal(&s.app, good_id["id"].as_str().unwrap()).await;
    let bad = bad_id["id"].as_str().unwrap();
    let (status, err) = json_call(
        &s.app,
        Method::POST,
        "/batches/evaluate",
        Some(json!({ "run_ids": [ids[0], bad, "run-missing"], "metrics": "flip-rate" })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let details: Vec<String> =
        err["error"]["details"].as_array().unwrap().iter().map(|d| d.as_str().unwrap().to_string()).collect();
    assert_eq!(details.len(), 2, "{details:?}");
    assert!(details.iter().any(|d| d.contains(bad) && d.contains("rejected")));
    assert!(details.iter().any(|d| d.contains("run-missing") && d.contains("not found")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_pushes_back() {
    let dir = tempfile::tempdir().unwrap();
    let s = fresh(dir.path(), 1).await;
    let mut statuses = Vec::new();
    let mut accepted = Vec::new();
    for seed in 0..6 {
        let mut body = Value::Null;
        for target in 0..2 {
            let mut req = request(3, target, seed);
            req["config"] = json!({ "attack": { "num_iterations": 40, "tau": 10, "respacing": 10 } });
            let (status, b) = json_call(&s.app, Method::POST, "/runs", Some(req)).await;
            if status != StatusCode::UNPROCESSABLE_ENTITY {
                statuses.push(status);
                body = b;
                break;
            }
        }
        if body["status"] == "queued" {
            accepted.push(body["id"].as_str().unwrap().to_string());
        }
    }
    assert!(statuses.contains(&StatusCode::SERVICE_UNAVAILABLE), "{statuses:?}");
    assert!(accepted.len() <= 2, "{accepted:?}");
    let (_, health) = json_call(&s.app, Method::GET, "/health", None).await;
    assert_eq!(health["status"], "ok");
    assert!(health["queue"]["running"].as_u64().unwrap() <= 1);
    for id in &accepted {
        wait_terminal(&s.app, id).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn catalogue_and_capabilities() {
    let dir = tempfile::tempdir().unwrap();
    let s = fresh(dir.path(), 4).await;
    let (status, caps) = json_call(&s.app, Method::GET, "/capabilities", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(caps["schema_version"], 1);
    assert_eq!(caps["knobs"]["attack.method"]["choices"], json!(["pgd", "gd", "cw"]));
    assert_eq!(caps["knobs"]["refine.dilation"]["odd"], true);
    assert_eq!(caps["denoisers"][0]["num_steps"], 100);
    assert!(caps["metrics"].as_array().unwrap().contains(&json!("sfid")));
    assert!(caps["presets"].as_array().unwrap().contains(&json!("celeba-like")));

    let (_, datasets) = json_call(&s.app, Method::GET, "/datasets", None).await;
    assert_eq!(datasets["datasets"][0]["id"], "synthetic");
    let (_, instances) = json_call(&s.app, Method::GET, "/datasets/synthetic/instances?split=test&limit=4", None).await;
    assert_eq!(instances["total"], 10);
    assert_eq!(instances["instances"].as_array().unwrap().len(), 4);
    let (status, png) = call(&s.app, Method::GET, "/datasets/synthetic/instances/1/image?split=test", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");
    let (status, _) = json_call(&s.app, Method::GET, "/datasets/none/instances", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = json_call(
        &s.app,
        Method::POST,
        "/models",
        Some(json!({ "path": dir.path().join("incoming/clf.ckpt"), "id": "clf" })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = json_call(
        &s.app,
        Method::POST,
        "/models",
        Some(json!({ "path": dir.path().join("incoming/clf.ckpt"), "id": "clf2", "kind": "denoiser" })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = json_call(&s.app, Method::POST, "/models", Some(json!({ "path": "/nowhere.ckpt" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
