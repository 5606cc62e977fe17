//! HTTP workbench for counterfactual explanations.
//!
//! Runs are submitted as JSON, queued on a bounded FIFO, executed by a
//! fixed number of compute slots and persisted under the data root, so a
//! restarted service still lists every finished run. Progress streams over
//! server-sent events, and batches of finished runs can be scored with the
//! metric suite.

pub mod api;
pub mod error;
pub mod events;
pub mod jobs;
pub mod records;
pub mod registry;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use ace_core::config::Settings;
use axum::routing::get;
use axum::Router;
use tokio::sync::{mpsc, Semaphore};
use tower_http::services::{ServeDir, ServeFile};

use crate::events::EventHub;
use crate::registry::Registry;
use crate::store::{IdGen, RunStore};

/// Version of every JSON document the service reads or writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_root: PathBuf,
    /// Concurrent explanation runs.
    pub slots: usize,
    /// Runs that may wait for a slot before submissions are refused.
    pub queue_capacity: usize,
    pub strict_ingest: bool,
    /// Static bundle served for paths the API does not claim.
    pub ui_dir: Option<PathBuf>,
    pub settings: Settings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_root: PathBuf::from("ace-data"),
            slots: 1,
            queue_capacity: 64,
            strict_ingest: false,
            ui_dir: None,
            settings: Settings::default(),
        }
    }
}

pub struct Inner {
    pub config: ServiceConfig,
    pub registry: Registry,
    pub store: RunStore,
    pub hub: EventHub,
    pub queue: mpsc::Sender<String>,
    /// Metric batches run one at a time.
    pub metrics_lane: Semaphore,
    pub batch_ids: IdGen,
    pub batches_dir: PathBuf,
}

pub type AppState = Arc<Inner>;

/// Opens the data root, starts the workers and builds the router. Must be
/// called inside a tokio runtime.
pub fn start(config: ServiceConfig) -> std::io::Result<(AppState, Router)> {
    if config.slots == 0 || config.queue_capacity == 0 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "slots and queue capacity must be positive"));
    }
    std::fs::create_dir_all(&config.data_root)?;
    let registry = Registry::open(&config.data_root, &config.settings.dataset, config.strict_ingest)?;
    let store = RunStore::open(config.data_root.join("runs"))?;
    let batches_dir = config.data_root.join("batches");
    std::fs::create_dir_all(&batches_dir)?;
    let batch_ids = IdGen::new("batch-");
    for entry in std::fs::read_dir(&batches_dir)?.flatten() {
        if let Some(stem) = entry.path().file_stem() {
            batch_ids.observe(&stem.to_string_lossy());
        }
    }
    let (tx, rx) = mpsc::channel(config.queue_capacity);
    let slots = config.slots;
    let ui_dir = config.ui_dir.clone();
    let state = Arc::new(Inner {
        config,
        registry,
        store,
        hub: EventHub::default(),
        queue: tx,
        metrics_lane: Semaphore::new(1),
        batch_ids,
        batches_dir,
    });
    jobs::spawn_workers(state.clone(), rx, slots);
    let mut router = api::routes();
    router = match ui_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            router.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => router.route("/", get(api::root_document)),
    };
    Ok((state.clone(), router.with_state(state)))
}

/// Serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let listen = config.listen;
    let (_state, router) = start(config)?;
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(address = %listener.local_addr()?, "workbench listening");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
