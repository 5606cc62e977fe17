//! HTTP routes.

use std::convert::Infallible;
use std::path::PathBuf;

use ace_core::config::{explain_with, preset_names};
use ace_core::engine::run_dir::{read_run_dir, MANIFEST_JSON};
use ace_core::engine::{
    diversity_run_config, AttackMethod, DistanceAnchor, DistanceNorm, ExplainConfig, DEFAULT_GD_STEP, DEFAULT_PGD_STEP,
};
use ace_core::metrics::{evaluate_runs, EvaluationOptions, MetricKind, MetricReport, MetricSuite};
use ace_core::zoo::{predict_labels, Classifier, PerceptualDistance};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, KeepAliveStream, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, BoxStream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::error::{ApiError, ApiResult};
use crate::events::RunEvent;
use crate::records::{now, RunRecord, RunRequest, RunStatus};
use crate::registry::ModelKind;
use crate::store::write_atomic;
use crate::{AppState, SCHEMA_VERSION};

pub fn routes() -> Router<AppState> {
    Router::new()
        .route("/health", get(health))
        .route("/capabilities", get(capabilities))
        .route("/runs", post(submit).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/artifacts/{name}", get(artifact))
        .route("/runs/{id}/events", get(events))
        .route("/batches/evaluate", post(evaluate))
        .route("/batches/{id}", get(get_batch))
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/instances", get(list_instances))
        .route("/datasets/{id}/instances/{index}/image", get(instance_image))
        .route("/models", get(list_models).post(register_model))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::config(format!("malformed JSON body: {e}")))?;
    if let Some(v) = value.get("schema_version") {
        if v.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(ApiError::config(format!("unsupported schema_version {v}; this service speaks {SCHEMA_VERSION}")));
        }
    }
    serde_json::from_value(value).map_err(|e| ApiError::config(format!("invalid request: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("task failed: {e}")))?
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "slots": s.config.slots,
        "queue": {
            "queued": s.store.count(RunStatus::Queued),
            "running": s.store.count(RunStatus::Running),
            "capacity": s.config.queue_capacity,
        },
    }))
}

fn enum_names<T: Serialize>(items: &[T]) -> Vec<Value> {
    items.iter().map(|i| serde_json::to_value(i).unwrap_or(Value::Null)).collect()
}

/// Valid ranges for every knob, so clients never hard-code them.
async fn capabilities(State(s): State<AppState>) -> Json<Value> {
    let defaults = &s.config.settings.explain;
    let chains: Vec<Value> = s
        .registry
        .models()
        .into_iter()
        .filter(|m| m.kind == ModelKind::Denoiser)
        .map(|m| json!({ "id": m.id, "num_steps": m.num_steps, "max_timestep": m.max_timestep }))
        .collect();
    let max_steps = chains.iter().filter_map(|c| c["num_steps"].as_u64()).max().unwrap_or(1000);
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "version": env!("CARGO_PKG_VERSION"),
        "defaults": defaults,
        "knobs": {
            "attack.method": { "type": "enum", "choices": enum_names(&[AttackMethod::Pgd, AttackMethod::Gd, AttackMethod::Cw]), "default": defaults.attack.method },
            "attack.num_iterations": { "type": "integer", "min": 0, "max": 1000, "default": defaults.attack.num_iterations },
            "attack.step_size": { "type": "number", "exclusive_min": 0.0, "default": null, "method_defaults": { "pgd": DEFAULT_PGD_STEP, "gd": DEFAULT_GD_STEP, "cw": DEFAULT_GD_STEP } },
            "attack.lambda_d": { "type": "number", "min": 0.0, "default": defaults.attack.lambda_d },
            "attack.distance_norm": { "type": "enum", "choices": enum_names(&[DistanceNorm::L1, DistanceNorm::L2]), "default": defaults.attack.distance_norm },
            "attack.distance_anchor": { "type": "enum", "choices": enum_names(&[DistanceAnchor::Iterate, DistanceAnchor::Filtered]), "default": defaults.attack.distance_anchor },
            "attack.tau": { "type": "integer", "min": 0, "max_field": "attack.respacing", "default": defaults.attack.tau },
            "attack.respacing": { "type": "integer", "min": 1, "max": max_steps, "default": defaults.attack.respacing },
            "refine.dilation": { "type": "integer", "min": 1, "max": 63, "odd": true, "default": defaults.refine.dilation },
            "refine.threshold": { "type": "number", "min": 0.0, "max": 1.0, "default": defaults.refine.threshold },
            "refine.tau": { "type": "integer", "min": 0, "nullable": true, "default": defaults.refine.tau },
            "refine.respacing": { "type": "integer", "min": 1, "max": max_steps, "nullable": true, "default": defaults.refine.respacing },
            "refine.use_mask": { "type": "boolean", "default": defaults.refine.use_mask },
            "diversity.respacings": { "type": "integer-list", "min": 1, "max": max_steps, "default": defaults.diversity.respacings },
        },
        "diversity": { "min_k": 2, "max_k": 16 },
        "metrics": enum_names(&MetricKind::ALL),
        "presets": preset_names().collect::<Vec<_>>(),
        "artifacts": ["input", "pre_explanation", "mask", "counterfactual"],
        "statuses": enum_names(&[RunStatus::Queued, RunStatus::Running, RunStatus::Succeeded, RunStatus::Failed, RunStatus::Rejected]),
        "denoisers": chains,
        "limits": { "slots": s.config.slots, "queue_capacity": s.config.queue_capacity },
    }))
}

/// Checks a request and resolves its configuration.
fn prepare(s: &AppState, req: &RunRequest) -> ApiResult<(ExplainConfig, usize)> {
    let config = explain_with(&s.config.settings.explain, &req.config)?;
    let classifier = s.registry.classifier(&req.classifier)?;
    let denoiser = s.registry.denoiser(&req.denoiser)?;
    let dataset = s.registry.dataset(&req.dataset)?;
    let g = classifier.geometry();
    let dg = ace_core::diffusion::Denoiser::geometry(denoiser.as_ref());
    if g != dg || g != dataset.descriptor.geometry {
        return Err(ApiError::invalid(format!(
            "geometry mismatch: classifier {g}, denoiser {dg}, dataset {}",
            dataset.descriptor.geometry
        )));
    }
    let steps = denoiser.schedule().num_steps();
    config.validate_for_chain(steps)?;
    if req.diversity {
        diversity_run_config(&config, req.seed, steps)?.validate_for_chain(steps)?;
    }
    let (image, _) = dataset.instance(&req.split, req.index)?;
    if req.target >= classifier.num_classes() {
        return Err(ApiError::invalid(format!("target {} out of range for {} classes", req.target, classifier.num_classes())));
    }
    let prediction = predict_labels(classifier.as_ref(), &image.unsqueeze(0).map_err(ace_core::Error::from)?)?[0];
    Ok((config, prediction))
}

async fn submit(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: RunRequest = parse_body(&body)?;
    let st = s.clone();
    let checked = req.clone();
    let (config, prediction) = blocking(move || prepare(&st, &checked)).await?;
    if prediction == req.target {
        let mut record = RunRecord::new(s.store.next_id(), req, Some(config));
        record.status = RunStatus::Rejected;
        record.reason = Some("target equals prediction".into());
        record.finished_at = Some(now());
        s.store.insert(record.clone())?;
        return Ok((StatusCode::UNPROCESSABLE_ENTITY, Json(record)).into_response());
    }
    let permit = s
        .queue
        .try_reserve()
        .map_err(|_| ApiError::busy(format!("queue is full ({} pending runs)", s.config.queue_capacity)))?;
    let record = RunRecord::new(s.store.next_id(), req, Some(config));
    s.store.insert(record.clone())?;
    s.hub.open(&record.id);
    s.hub.publish(&record.id, RunEvent::Status { status: RunStatus::Queued, reason: None });
    permit.send(record.id.clone());
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list_runs(State(s): State<AppState>, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    let mut statuses = Vec::new();
    for item in q.status.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        statuses.push(RunStatus::parse(item).ok_or_else(|| ApiError::config(format!("unknown status `{item}`")))?);
    }
    Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "runs": s.store.list(&statuses) })))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    s.store.get(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("run `{id}`")))
}

async fn artifact(State(s): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let record = s.store.get(&id).ok_or_else(|| ApiError::not_found(format!("run `{id}`")))?;
    let name = name.trim_end_matches(".png").trim_end_matches(".json");
    let (file, mime) = if name == "manifest" {
        (MANIFEST_JSON.to_string(), "application/json")
    } else if record.artifacts.contains_key(name) {
        (format!("{name}.png"), "image/png")
    } else {
        return Err(ApiError::not_found(format!("artifact `{name}` of run `{id}`")));
    };
    if record.status != RunStatus::Succeeded {
        return Err(ApiError::not_found(format!("run `{id}` has no artifacts")));
    }
    let bytes = tokio::fs::read(s.store.run_dir(&id).join(file)).await?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn events(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<KeepAliveStream<BoxStream<'static, Result<Event, Infallible>>>>> {
    let record = s.store.get(&id).ok_or_else(|| ApiError::not_found(format!("run `{id}`")))?;
    let (history, rx) = match s.hub.subscribe(&id) {
        Some((h, rx)) => (h, Some(rx)),
        None => (vec![RunEvent::Status { status: record.status, reason: record.reason.clone() }], None),
    };
    let finished = history.iter().any(RunEvent::is_terminal);
    let live: BoxStream<'static, RunEvent> = match rx {
        Some(rx) if !finished => stream::unfold(rx, |mut rx| async move {
            loop {
                match rx.recv().await {
                    Ok(ev) => return Some((ev, rx)),
                    Err(RecvError::Lagged(_)) => continue,
                    Err(RecvError::Closed) => return None,
                }
            }
        })
        .boxed(),
        _ => stream::empty().boxed(),
    };
    let events = stream::iter(history).chain(live).boxed();
    let stream = stream::unfold((events, false), |(mut events, done)| async move {
        if done {
            return None;
        }
        let ev = events.next().await?;
        let terminal = ev.is_terminal();
        Some((ev, (events, terminal)))
    })
    .map(|ev| Ok(Event::default().event(ev.name()).json_data(&ev).unwrap_or_default()))
        .boxed();
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchRequest {
    #[serde(default)]
    schema_version: Option<u32>,
    #[serde(default)]
    run_ids: Option<Vec<String>>,
    /// Alternative to `run_ids`: every succeeded run on this dataset split.
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    classifier: Option<String>,
    #[serde(default)]
    metrics: Option<Value>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    cout_steps: Option<usize>,
    #[serde(default)]
    sfid_splits: Option<usize>,
    #[serde(default)]
    fid_encoder: Option<String>,
    #[serde(default)]
    fs_encoder: Option<String>,
    #[serde(default)]
    s3_encoder: Option<String>,
    #[serde(default)]
    perceptual_encoder: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub schema_version: u32,
    pub id: String,
    pub run_ids: Vec<String>,
    pub metrics: Vec<MetricKind>,
    pub options: EvaluationOptions,
    pub report: MetricReport,
    pub created_at: String,
}

fn metric_list(v: &Option<Value>) -> ApiResult<Vec<MetricKind>> {
    let text = match v {
        None => "all".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| i.as_str().map(str::to_string).ok_or_else(|| ApiError::config("metrics must be strings")))
            .collect::<ApiResult<Vec<_>>>()?
            .join(","),
        Some(_) => return Err(ApiError::config("metrics must be a string or a list of strings")),
    };
    Ok(MetricKind::parse_list(&text)?)
}

fn select_runs(s: &AppState, req: &BatchRequest) -> ApiResult<Vec<RunRecord>> {
    match (&req.run_ids, &req.dataset) {
        (Some(ids), None) => {
            if ids.is_empty() {
                return Err(ApiError::invalid("run_ids is empty"));
            }
            let mut problems = Vec::new();
            let mut runs = Vec::new();
            for id in ids {
                match s.store.get(id) {
                    None => problems.push(format!("run {id}: not found")),
                    Some(r) if r.status != RunStatus::Succeeded => {
                        problems.push(format!("run {id}: {}{}", r.status, r.reason.map(|m| format!(" ({m})")).unwrap_or_default()))
                    }
                    Some(r) => runs.push(r),
                }
            }
            if !problems.is_empty() {
                return Err(ApiError::invalid(format!("{} of {} runs cannot be evaluated", problems.len(), ids.len())).with_details(problems));
            }
            Ok(runs)
        }
        (None, Some(dataset)) => {
            let split = req.split.clone().unwrap_or_else(|| "test".into());
            let runs: Vec<RunRecord> = s
                .store
                .list(&[RunStatus::Succeeded])
                .into_iter()
                .filter(|r| &r.request.dataset == dataset && r.request.split == split)
                .filter(|r| req.classifier.as_ref().is_none_or(|c| &r.request.classifier == c))
                .collect();
            if runs.is_empty() {
                return Err(ApiError::invalid(format!("no succeeded runs on {dataset}/{split}")));
            }
            Ok(runs)
        }
        _ => Err(ApiError::config("give exactly one of run_ids or dataset")),
    }
}

fn run_evaluation(s: &AppState, req: BatchRequest) -> ApiResult<BatchRecord> {
    let metrics = metric_list(&req.metrics)?;
    let runs = select_runs(s, &req)?;
    let classifier_id = runs[0].request.classifier.clone();
    if let Some(other) = runs.iter().find(|r| r.request.classifier != classifier_id) {
        return Err(ApiError::invalid(format!(
            "runs explain different classifiers: {classifier_id} and {}",
            other.request.classifier
        )));
    }
    let classifier = s.registry.classifier(&classifier_id)?;
    let fid_encoder = s.registry.encoder(req.fid_encoder.as_deref().unwrap_or(&classifier_id))?;
    let fs_encoder = s.registry.encoder(req.fs_encoder.as_deref().unwrap_or(&classifier_id))?;
    let s3_id = req.s3_encoder.clone().or_else(|| s.registry.default_self_supervised());
    let s3_encoder = s3_id.as_deref().map(|id| s.registry.encoder(id)).transpose()?;
    let perceptual = PerceptualDistance::new(s.registry.layered(req.perceptual_encoder.as_deref().unwrap_or(&classifier_id))?);
    let stored = runs
        .iter()
        .map(|r| read_run_dir(s.store.run_dir(&r.id)))
        .collect::<ace_core::Result<Vec<_>>>()?;
    let defaults = &s.config.settings.evaluation;
    let options = EvaluationOptions {
        cout_steps: req.cout_steps.unwrap_or(defaults.cout_steps),
        sfid_splits: req.sfid_splits.unwrap_or(defaults.sfid_splits),
        seed: req.seed,
    };
    let suite = MetricSuite {
        classifier: Some(classifier.as_ref() as &dyn Classifier),
        fid_encoder: Some(fid_encoder.as_ref()),
        fs_encoder: Some(fs_encoder.as_ref()),
        s3_encoder: s3_encoder.as_deref(),
        perceptual: Some(perceptual),
    };
    let report = evaluate_runs(&stored, &metrics, &suite, &options)?;
    let record = BatchRecord {
        schema_version: SCHEMA_VERSION,
        id: s.batch_ids.next(),
        run_ids: runs.iter().map(|r| r.id.clone()).collect(),
        metrics,
        options,
        report,
        created_at: now(),
    };
    let bytes = serde_json::to_vec_pretty(&record).map_err(ace_core::Error::from)?;
    write_atomic(&s.batches_dir.join(format!("{}.json", record.id)), &bytes)?;
    let scalars = serde_json::to_value(&record.report).map_err(ace_core::Error::from)?;
    for id in &record.run_ids {
        s.store.update(id, |r| {
            r.metrics.insert(record.id.clone(), scalars.clone());
        })?;
    }
    Ok(record)
}

async fn evaluate(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<BatchRecord>> {
    let req: BatchRequest = parse_body(&body)?;
    let _ = req.schema_version;
    let _lane = s.metrics_lane.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let st = s.clone();
    Ok(Json(blocking(move || run_evaluation(&st, req)).await?))
}

async fn get_batch(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    if !id.starts_with("batch-") || id.contains(['/', '\\', '.']) {
        return Err(ApiError::not_found(format!("batch `{id}`")));
    }
    let path = s.batches_dir.join(format!("{id}.json"));
    let text = tokio::fs::read_to_string(&path).await.map_err(|_| ApiError::not_found(format!("batch `{id}`")))?;
    Ok(Json(serde_json::from_str(&text).map_err(ace_core::Error::from)?))
}

async fn list_datasets(State(s): State<AppState>) -> Json<Value> {
    Json(json!({ "schema_version": SCHEMA_VERSION, "datasets": s.registry.datasets() }))
}

#[derive(Deserialize)]
struct SplitQuery {
    split: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_instances(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SplitQuery>,
) -> ApiResult<Json<Value>> {
    let split = q.split.unwrap_or_else(|| "test".into());
    let all = s.registry.instances(&id, &split)?;
    let total = all.len();
    let offset = q.offset.unwrap_or(0).min(total);
    let limit = q.limit.unwrap_or(total);
    let page: Vec<_> = all.into_iter().skip(offset).take(limit).collect();
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "dataset": id,
        "split": split,
        "total": total,
        "offset": offset,
        "instances": page,
    })))
}

async fn instance_image(
    State(s): State<AppState>,
    Path((id, index)): Path<(String, usize)>,
    Query(q): Query<SplitQuery>,
) -> ApiResult<Response> {
    let dataset = s.registry.dataset(&id)?;
    let split = q.split.unwrap_or_else(|| "test".into());
    let (image, _) = dataset.instance(&split, index)?;
    let png = ace_core::image::encode_png(&image)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn list_models(State(s): State<AppState>) -> Json<Value> {
    Json(json!({ "schema_version": SCHEMA_VERSION, "models": s.registry.models() }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterRequest {
    #[serde(default)]
    schema_version: Option<u32>,
    path: PathBuf,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    kind: Option<ModelKind>,
}

async fn register_model(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: RegisterRequest = parse_body(&body)?;
    let _ = req.schema_version;
    let st = s.clone();
    let info = blocking(move || st.registry.register_model(&req.path, req.id.as_deref(), req.kind)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "schema_version": SCHEMA_VERSION, "model": info }))))
}

/// Placeholder root document when no UI bundle is configured.
pub async fn root_document() -> Json<Value> {
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "service": "ace-workbench",
        "ui": false,
        "capabilities": "/capabilities",
    }))
}
