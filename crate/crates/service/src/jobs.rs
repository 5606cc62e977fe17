//! Explanation jobs: one worker per compute slot pulling from a bounded
//! FIFO queue.

use std::sync::Arc;

use ace_core::engine::run_dir::{write_run_dir, Manifest, ARTIFACTS};
use ace_core::engine::{diversity_run_config, Explainer, Request};
use ace_core::zoo::Classifier;
use tokio::sync::{mpsc, Mutex};

use crate::events::RunEvent;
use crate::records::{now, Progress, RunStatus, RunSummary};
use crate::AppState;

/// Starts `slots` workers draining `rx`.
pub fn spawn_workers(state: AppState, rx: mpsc::Receiver<String>, slots: usize) {
    let rx = Arc::new(Mutex::new(rx));
    for slot in 0..slots {
        let rx = rx.clone();
        let state = state.clone();
        tokio::spawn(async move {
            loop {
                let next = rx.lock().await.recv().await;
                let Some(id) = next else { break };
                let st = state.clone();
                let job_id = id.clone();
                let outcome = tokio::task::spawn_blocking(move || execute(&st, &job_id)).await;
                if let Err(e) = outcome {
                    tracing::error!(slot, id, error = %e, "worker task panicked");
                    fail(&state, &id, format!("worker panicked: {e}"));
                }
            }
        });
    }
}

fn fail(state: &AppState, id: &str, reason: String) {
    let updated = state.store.update(id, |r| {
        r.status = RunStatus::Failed;
        r.reason = Some(reason.clone());
        r.progress = None;
        r.finished_at = Some(now());
    });
    match updated {
        Ok(_) => state.hub.publish(id, RunEvent::Status { status: RunStatus::Failed, reason: Some(reason) }),
        Err(e) => tracing::error!(id, error = %e, "could not record failure"),
    }
}

fn execute(state: &AppState, id: &str) {
    let started = state.store.update(id, |r| {
        r.status = RunStatus::Running;
        r.started_at = Some(now());
    });
    let record = match started {
        Ok(r) => r,
        Err(e) => {
            tracing::error!(id, error = %e, "run could not start");
            return;
        }
    };
    state.hub.publish(id, RunEvent::Status { status: RunStatus::Running, reason: None });
    match run(state, &record) {
        Ok(()) => {}
        Err(reason) => fail(state, id, reason),
    }
}

fn run(state: &AppState, record: &crate::records::RunRecord) -> Result<(), String> {
    let req = &record.request;
    let err = |e: crate::error::ApiError| e.message;
    let classifier = state.registry.classifier(&req.classifier).map_err(err)?;
    let denoiser = state.registry.denoiser(&req.denoiser).map_err(err)?;
    let dataset = state.registry.dataset(&req.dataset).map_err(err)?;
    let (image, _) = dataset.instance(&req.split, req.index).map_err(|e| e.to_string())?;
    let mut config = record.config.clone().ok_or("run has no resolved configuration")?;
    if req.diversity {
        config = diversity_run_config(&config, req.seed, denoiser.schedule().num_steps()).map_err(|e| e.to_string())?;
    }
    let explainer = Explainer { classifier: classifier.as_ref(), denoiser: denoiser.as_ref(), schedule: denoiser.schedule() };
    let request = Request { image, target: req.target, seed: req.seed };
    let id = record.id.as_str();
    let result = explainer
        .explain(&request, &config, &mut |p| {
            let progress = Progress::from(p);
            state.store.set_progress(id, progress);
            state.hub.publish(id, RunEvent::Progress(progress));
        })
        .map_err(|e| e.to_string())?;
    let invocation = serde_json::to_value(req).map_err(|e| e.to_string())?;
    let mut manifest = Manifest::from_result(&result, classifier.label_names(), invocation).map_err(|e| e.to_string())?;
    manifest.created_at = Some(record.created_at.clone());
    write_run_dir(state.store.run_dir(id), &result, &manifest).map_err(|e| e.to_string())?;
    let summary = RunSummary::from_result(&result, classifier.label_names());
    state
        .store
        .update(id, |r| {
            r.status = RunStatus::Succeeded;
            r.config = Some(config.clone());
            r.progress = None;
            r.summary = Some(summary);
            r.finished_at = Some(now());
            r.artifacts = ARTIFACTS
                .iter()
                .map(|f| {
                    let name = f.trim_end_matches(".png").to_string();
                    let url = format!("/runs/{id}/artifacts/{name}");
                    (name, url)
                })
                .collect();
        })
        .map_err(|e| e.to_string())?;
    state.hub.publish(id, RunEvent::Status { status: RunStatus::Succeeded, reason: None });
    Ok(())
}
