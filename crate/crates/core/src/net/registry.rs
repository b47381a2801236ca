//! Connected actors as seen by the learner.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::error::{Error, Result};

pub const HEARTBEAT_PERIOD: Duration = Duration::from_secs(2);
pub const STALE_AFTER: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq)]
pub struct ActorEntry {
    pub last_seen: Instant,
    /// Newest snapshot version sent to this actor.
    pub snapshot_version: u64,
    pub transitions: u64,
    pub episodes: u64,
    pub connected: bool,
    pub task_ids: Vec<u32>,
}

#[derive(Debug, Default)]
pub struct ActorRegistry {
    entries: Mutex<BTreeMap<u32, ActorEntry>>,
}

impl ActorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a connection. A second live connection with the same id is
    /// refused; a reconnect after a disconnect keeps the counters.
    pub fn connect(&self, actor_id: u32, task_ids: Vec<u32>, now: Instant) -> Result<()> {
        let mut m = self.entries.lock();
        match m.get_mut(&actor_id) {
            Some(e) if e.connected => Err(Error::Protocol(format!("actor {actor_id} is already connected"))),
            Some(e) => {
                e.connected = true;
                e.last_seen = now;
                e.task_ids = task_ids;
                Ok(())
            }
            None => {
                m.insert(
                    actor_id,
                    ActorEntry {
                        last_seen: now,
                        snapshot_version: 0,
                        transitions: 0,
                        episodes: 0,
                        connected: true,
                        task_ids,
                    },
                );
                Ok(())
            }
        }
    }

    pub fn disconnect(&self, actor_id: u32) {
        if let Some(e) = self.entries.lock().get_mut(&actor_id) {
            e.connected = false;
        }
    }

    pub fn heartbeat(&self, actor_id: u32, now: Instant) {
        if let Some(e) = self.entries.lock().get_mut(&actor_id) {
            e.last_seen = e.last_seen.max(now);
        }
    }

    pub fn record_episode(&self, actor_id: u32, transitions: u64, now: Instant) {
        if let Some(e) = self.entries.lock().get_mut(&actor_id) {
            e.transitions += transitions;
            e.episodes += 1;
            e.last_seen = e.last_seen.max(now);
        }
    }

    /// Records a snapshot sent to the actor; returns `false` (and keeps the
    /// old value) for a version older than one already sent.
    pub fn record_snapshot(&self, actor_id: u32, version: u64) -> bool {
        match self.entries.lock().get_mut(&actor_id) {
            Some(e) if version >= e.snapshot_version => {
                e.snapshot_version = version;
                true
            }
            _ => false,
        }
    }

    pub fn is_stale(&self, actor_id: u32, now: Instant) -> bool {
        self.entries
            .lock()
            .get(&actor_id)
            .is_some_and(|e| now.saturating_duration_since(e.last_seen) > STALE_AFTER)
    }

    pub fn stale(&self, now: Instant) -> Vec<u32> {
        self.entries
            .lock()
            .iter()
            .filter(|(_, e)| now.saturating_duration_since(e.last_seen) > STALE_AFTER)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn get(&self, actor_id: u32) -> Option<ActorEntry> {
        self.entries.lock().get(&actor_id).cloned()
    }

    pub fn snapshot(&self) -> BTreeMap<u32, ActorEntry> {
        self.entries.lock().clone()
    }

    pub fn connected(&self) -> usize {
        self.entries.lock().values().filter(|e| e.connected).count()
    }
}
