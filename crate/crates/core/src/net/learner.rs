//! The centralized learner service.
//!
//! One thread per connection decodes frames and ingests episodes into the
//! shared buffer; the calling thread runs the learning context. In
//! [`Schedule::Lockstep`] the learner only updates when an actor asks for a
//! snapshot after an episode, which reproduces the in-process
//! deterministic schedule for a single actor.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::Ordering;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::trainer::{
    serial_learner_turn, EpisodeBatch, Learner, LearningContext, MetricsLog, MetricsRecord, OnlineReport, SharedState,
    StopRule,
};

use super::protocol::{read_message, write_message, WireMessage, PROTOCOL_VERSION};
use super::registry::ActorRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Learn continuously; snapshots are pushed as they are published.
    /// Episode acknowledgements are held back while the received
    /// environment steps lead the update budget by more than `max_lag`.
    Concurrent { max_lag: u64 },
    /// Learn only when an actor requests a snapshot after an episode.
    Lockstep,
}

enum ToLearner {
    Turn(Sender<WireMessage>),
    ActorMetrics(u32, Vec<(String, u64)>),
}

type Writer = Arc<Mutex<TcpStream>>;

/// A bound learner that has not started serving yet.
pub struct LearnerServer {
    listener: TcpListener,
    shared: Arc<SharedState>,
    registry: Arc<ActorRegistry>,
}

impl LearnerServer {
    pub fn bind(addr: &str, learner: &Learner, buffer: ReplayBuffer) -> Result<Self> {
        let listener = TcpListener::bind(addr)
            .map_err(|e| Error::Protocol(format!("cannot bind {addr}: {e}")))?;
        Ok(Self {
            listener,
            shared: Arc::new(SharedState::new(buffer, learner.snapshot())),
            registry: Arc::new(ActorRegistry::new()),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Counters and buffers; setting `stop` ends [`Self::run`].
    pub fn shared(&self) -> Arc<SharedState> {
        self.shared.clone()
    }

    pub fn registry(&self) -> Arc<ActorRegistry> {
        self.registry.clone()
    }

    /// Serves until the stop rule, the environment-step budget or an
    /// external stop. Returns the report and the final buffer.
    pub fn run(
        self,
        learner: &mut Learner,
        schedule: Schedule,
        stop_rule: StopRule,
        metrics: &mut MetricsLog,
    ) -> Result<(OnlineReport, ReplayBuffer)> {
        let Self {
            listener,
            shared,
            registry,
        } = self;
        listener.set_nonblocking(true)?;
        let (to_learner, inbox) = mpsc::channel::<ToLearner>();
        let writers: Arc<Mutex<Vec<(Writer, TcpStream)>>> = Arc::default();
        let mut conn_threads = Vec::new();
        let utd = learner.cfg.updates_per_step;

        let mut ctx = LearningContext::new(learner, &shared, metrics, stop_rule);
        let result = (|| -> Result<()> {
            loop {
                // Accept new actors.
                loop {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            stream.set_nonblocking(false)?;
                            stream.set_nodelay(true)?;
                            let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
                            writers.lock().push((writer.clone(), stream.try_clone()?));
                            let conn = Connection {
                                shared: shared.clone(),
                                registry: registry.clone(),
                                writer,
                                to_learner: to_learner.clone(),
                                schedule,
                                utd,
                            };
                            conn_threads.push(std::thread::spawn(move || conn.serve(stream)));
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                        Err(e) => return Err(e.into()),
                    }
                }
                if shared.stopped() {
                    return Ok(());
                }
                match schedule {
                    Schedule::Concurrent { .. } => {
                        let mut worked = false;
                        while let Ok(msg) = inbox.try_recv() {
                            handle_inbox(&mut ctx, msg)?;
                        }
                        if ctx.try_update()? {
                            worked = true;
                        }
                        if ctx.maybe_eval()? || ctx.budget_exhausted() {
                            return Ok(());
                        }
                        if !worked {
                            std::thread::sleep(Duration::from_millis(1));
                        }
                    }
                    Schedule::Lockstep => match inbox.recv_timeout(Duration::from_millis(5)) {
                        Ok(ToLearner::Turn(reply)) => {
                            serial_learner_turn(&mut ctx)?;
                            let stop = ctx.maybe_eval()? || ctx.budget_exhausted();
                            let msg = if stop {
                                WireMessage::Shutdown {
                                    reason: "training finished".into(),
                                }
                            } else {
                                WireMessage::Snapshot(Box::new((*ctx.shared.snapshots.latest()).clone()))
                            };
                            let _ = reply.send(msg);
                            if stop {
                                return Ok(());
                            }
                        }
                        Ok(other) => handle_inbox(&mut ctx, other)?,
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => {}
                    },
                }
            }
        })();
        shared.stop.store(true, Ordering::SeqCst);
        let report = ctx.finish();
        for (w, raw) in writers.lock().drain(..) {
            let _ = write_message(
                &mut *w.lock(),
                &WireMessage::Shutdown {
                    reason: "learner stopped".into(),
                },
            );
            // Half-close so the notice is not lost to a reset; the
            // connection thread drains until the actor hangs up.
            let _ = raw.set_read_timeout(Some(Duration::from_secs(2)));
            let _ = raw.shutdown(std::net::Shutdown::Write);
        }
        drop(to_learner);
        for t in conn_threads {
            let _ = t.join();
        }
        result?;
        let buffer = match Arc::try_unwrap(shared) {
            Ok(s) => s.buffer.into_inner(),
            Err(s) => s.buffer.read().clone(),
        };
        Ok((report, buffer))
    }
}

fn handle_inbox(ctx: &mut LearningContext<'_>, msg: ToLearner) -> Result<()> {
    match msg {
        ToLearner::ActorMetrics(actor_id, counters) => ctx.metrics.log(&MetricsRecord {
            phase: format!("actor-{actor_id}"),
            step: ctx.shared.env_steps.load(Ordering::SeqCst),
            updates: ctx.learner.updates,
            counters: counters.into_iter().collect(),
            ..Default::default()
        }),
        ToLearner::Turn(reply) => {
            // Concurrent schedule: the learner is already running.
            let _ = reply.send(WireMessage::Snapshot(Box::new((*ctx.shared.snapshots.latest()).clone())));
            Ok(())
        }
    }
}

struct Connection {
    shared: Arc<SharedState>,
    registry: Arc<ActorRegistry>,
    writer: Writer,
    to_learner: Sender<ToLearner>,
    schedule: Schedule,
    utd: f64,
}

impl Connection {
    fn send(&self, msg: &WireMessage) -> Result<()> {
        write_message(&mut *self.writer.lock(), msg)
    }

    /// Sends the latest snapshot if it is newer than the last one sent.
    fn push_snapshot(&self, actor_id: u32, force: bool) -> Result<()> {
        let mut w = self.writer.lock();
        let snap = self.shared.snapshots.latest();
        let sent = self.registry.get(actor_id).map_or(0, |e| e.snapshot_version);
        if (force && snap.version >= sent) || snap.version > sent {
            self.registry.record_snapshot(actor_id, snap.version);
            write_message(&mut *w, &WireMessage::Snapshot(Box::new((*snap).clone())))?;
        }
        Ok(())
    }

    fn serve(self, stream: TcpStream) {
        let mut reader = BufReader::new(stream);
        let actor_id = match self.handshake(&mut reader) {
            Ok(id) => id,
            Err(e) => {
                let _ = self.send(&WireMessage::Shutdown { reason: e.to_string() });
                return;
            }
        };
        let pusher = match self.schedule {
            Schedule::Concurrent { .. } => Some(self.spawn_pusher(actor_id)),
            Schedule::Lockstep => None,
        };
        if let Err(e) = self.session(actor_id, &mut reader) {
            let _ = self.send(&WireMessage::Shutdown { reason: e.to_string() });
        }
        self.registry.disconnect(actor_id);
        if let Some((flag, h)) = pusher {
            flag.store(true, Ordering::SeqCst);
            let _ = h.join();
        }
    }

    fn handshake(&self, reader: &mut BufReader<TcpStream>) -> Result<u32> {
        match read_message(reader)? {
            Some(WireMessage::Hello {
                actor_id,
                task_ids,
                protocol_version,
            }) => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!(
                        "protocol version {protocol_version} not supported (learner speaks {PROTOCOL_VERSION})"
                    )));
                }
                self.registry.connect(actor_id, task_ids, Instant::now())?;
                self.push_snapshot(actor_id, true)?;
                Ok(actor_id)
            }
            Some(other) => Err(Error::Protocol(format!("expected Hello, got {}", other.name()))),
            None => Err(Error::Protocol("connection closed before Hello".into())),
        }
    }

    fn spawn_pusher(&self, actor_id: u32) -> (Arc<std::sync::atomic::AtomicBool>, std::thread::JoinHandle<()>) {
        let flag = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let me = Connection {
            shared: self.shared.clone(),
            registry: self.registry.clone(),
            writer: self.writer.clone(),
            to_learner: self.to_learner.clone(),
            schedule: self.schedule,
            utd: self.utd,
        };
        let done = flag.clone();
        let h = std::thread::spawn(move || {
            while !done.load(Ordering::SeqCst) && !me.shared.stopped() {
                if me.push_snapshot(actor_id, false).is_err() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        });
        (flag, h)
    }

    /// Holds the caller while received steps lead the update budget.
    fn back_pressure(&self) {
        let Schedule::Concurrent { max_lag } = self.schedule else {
            return;
        };
        if self.utd <= 0.0 {
            return;
        }
        let gate = |s: &SharedState| s.online_updates.load(Ordering::SeqCst) > 0;
        while !self.shared.stopped() && gate(&self.shared) {
            let steps = self.shared.env_steps.load(Ordering::SeqCst);
            let covered = (self.shared.online_updates.load(Ordering::SeqCst) as f64 / self.utd) as u64;
            if steps <= covered + max_lag {
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    fn session(&self, actor_id: u32, reader: &mut BufReader<TcpStream>) -> Result<()> {
        let mut pending: HashMap<u64, Vec<crate::domain::TalkTweakRecord>> = HashMap::new();
        loop {
            let Some(msg) = read_message(reader)? else {
                return Ok(());
            };
            if self.shared.stopped() {
                continue;
            }
            self.registry.heartbeat(actor_id, Instant::now());
            match msg {
                WireMessage::TalkTweakBatch { episode_id, records } => {
                    pending.entry(episode_id).or_default().extend(records);
                }
                WireMessage::TransitionBatch {
                    task_id,
                    episode_id,
                    snapshot_version,
                    result,
                    transitions,
                } => {
                    let batch = EpisodeBatch {
                        episode_id,
                        actor_id,
                        task: task_id as usize,
                        snapshot_version,
                        records: pending.remove(&episode_id).unwrap_or_default(),
                        result,
                        transitions,
                    };
                    if self.shared.ingest(&batch)? {
                        self.registry
                            .record_episode(actor_id, batch.transitions.len() as u64, Instant::now());
                    }
                    self.back_pressure();
                    self.send(&WireMessage::EpisodeAck { episode_id })?;
                }
                WireMessage::SnapshotRequest { .. } => match self.schedule {
                    Schedule::Lockstep => {
                        let (tx, rx) = mpsc::channel();
                        if self.to_learner.send(ToLearner::Turn(tx)).is_err() {
                            return Ok(());
                        }
                        let Ok(reply) = rx.recv() else {
                            return Ok(());
                        };
                        if let WireMessage::Snapshot(s) = &reply {
                            self.registry.record_snapshot(actor_id, s.version);
                        }
                        self.send(&reply)?;
                    }
                    Schedule::Concurrent { .. } => self.push_snapshot(actor_id, true)?,
                },
                WireMessage::Metrics { counters, .. } => {
                    let _ = self.to_learner.send(ToLearner::ActorMetrics(actor_id, counters));
                }
                WireMessage::Shutdown { .. } => return Ok(()),
                other => {
                    return Err(Error::Protocol(format!("unexpected {} from actor", other.name())));
                }
            }
        }
    }
}

/// Waits for a Hello-time refusal or the first snapshot; used by tests and
/// the CLI to probe a learner.
pub fn probe(addr: &str, actor_id: u32, protocol_version: u16) -> Result<WireMessage> {
    let mut s = TcpStream::connect(addr)?;
    write_message(
        &mut s,
        &WireMessage::Hello {
            actor_id,
            task_ids: vec![],
            protocol_version,
        },
    )?;
    let reply = read_message(&mut s)?.ok_or_else(|| Error::Protocol("learner closed the connection".into()))?;
    let _ = write_message(&mut s, &WireMessage::Shutdown { reason: "probe".into() });
    Ok(reply)
}
