//! Per-run progress channels with replay for late subscribers.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::records::{Progress, RunStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum RunEvent {
    Progress(Progress),
    Status {
        status: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl RunEvent {
    pub fn name(&self) -> &'static str {
        match self {
            RunEvent::Progress(_) => "progress",
            RunEvent::Status { .. } => "status",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, RunEvent::Status { status, .. } if status.is_terminal())
    }
}

struct Channel {
    history: Vec<RunEvent>,
    tx: broadcast::Sender<RunEvent>,
}

#[derive(Default)]
pub struct EventHub {
    channels: Mutex<HashMap<String, Channel>>,
}

const CHANNEL_CAPACITY: usize = 1024;

impl EventHub {
    pub fn publish(&self, id: &str, event: RunEvent) {
        let mut channels = self.channels.lock().expect("hub lock");
        let ch = channels.entry(id.to_string()).or_insert_with(|| Channel {
            history: Vec::new(),
            tx: broadcast::channel(CHANNEL_CAPACITY).0,
        });
        ch.history.push(event.clone());
        let _ = ch.tx.send(event);
    }

    /// Events so far and a receiver for the ones that follow, taken
    /// atomically so nothing is missed or repeated.
    pub fn subscribe(&self, id: &str) -> Option<(Vec<RunEvent>, broadcast::Receiver<RunEvent>)> {
        let channels = self.channels.lock().expect("hub lock");
        channels.get(id).map(|ch| (ch.history.clone(), ch.tx.subscribe()))
    }

    pub fn open(&self, id: &str) {
        let mut channels = self.channels.lock().expect("hub lock");
        channels.entry(id.to_string()).or_insert_with(|| Channel { history: Vec::new(), tx: broadcast::channel(CHANNEL_CAPACITY).0 });
    }
}
