//! Actor client: runs episodes with the newest snapshot it has received and
//! ships each finished episode to the learner.
//!
//! Episodes stay in a local outbox until the learner acknowledges them, so a
//! dropped connection only delays delivery; the learner's episode-id dedup
//! makes the resend exactly-once. Snapshots are applied between episodes.

use std::collections::{BTreeSet, VecDeque};
use std::io::BufReader;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::codec::{DatasetAppender, Record};
use crate::env::{EnvConfig, Supervisor};
use crate::error::{Error, Result};
use crate::trainer::{episode_id, run_supervised_episode, EpisodeBatch, PolicySnapshot, TrainConfig};

use super::protocol::{read_message, write_message, WireMessage, PROTOCOL_VERSION};
use super::registry::HEARTBEAT_PERIOD;

/// Deliberate connection faults, for exercising recovery.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Episode indices run while disconnected; the link comes back after.
    pub offline_episodes: BTreeSet<u64>,
    /// Episode indices after whose upload the connection is cut before the
    /// acknowledgement arrives, forcing a resend.
    pub drop_after_send: BTreeSet<u64>,
}

#[derive(Debug, Clone)]
pub struct ActorOptions {
    pub actor_id: u32,
    /// Request a snapshot after every episode and wait for it.
    pub lockstep: bool,
    pub pace: Option<Duration>,
    /// Unacknowledged episodes kept while disconnected.
    pub max_buffered: usize,
    pub max_episodes: Option<u64>,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    /// Give up when the learner stays unreachable this long.
    pub give_up_after: Duration,
    pub faults: Faults,
    /// Every finished episode's transitions are appended here.
    pub episode_log: Option<PathBuf>,
}

impl Default for ActorOptions {
    fn default() -> Self {
        Self {
            actor_id: 0,
            lockstep: false,
            pace: None,
            max_buffered: 64,
            max_episodes: None,
            backoff_initial: Duration::from_millis(50),
            backoff_max: Duration::from_secs(2),
            give_up_after: Duration::from_secs(60),
            faults: Faults::default(),
            episode_log: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActorReport {
    pub episodes: u64,
    pub env_steps: u64,
    /// `(episode_id, snapshot version used)` per episode.
    pub episode_versions: Vec<(u64, u64)>,
    pub connects: u32,
    pub uploads: u64,
    pub acked: u64,
    pub shutdown_reason: Option<String>,
}

enum Incoming {
    Msg(WireMessage),
    Closed,
}

struct Link {
    writer: Arc<Mutex<TcpStream>>,
    raw: TcpStream,
    inbox: Receiver<Incoming>,
    alive: Arc<AtomicBool>,
}

impl Link {
    fn send(&self, msg: &WireMessage) -> Result<()> {
        write_message(&mut *self.writer.lock(), msg)
    }

    fn close(self) {
        self.alive.store(false, Ordering::SeqCst);
        let _ = self.raw.shutdown(std::net::Shutdown::Both);
    }
}

fn open_link(addr: &str, actor_id: u32, counters: Arc<Mutex<Vec<(String, u64)>>>) -> Result<Link> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let alive = Arc::new(AtomicBool::new(true));
    let (tx, inbox) = mpsc::channel();
    let mut reader = BufReader::new(stream.try_clone()?);
    std::thread::spawn(move || loop {
        match read_message(&mut reader) {
            Ok(Some(m)) => {
                if tx.send(Incoming::Msg(m)).is_err() {
                    return;
                }
            }
            _ => {
                let _ = tx.send(Incoming::Closed);
                return;
            }
        }
    });
    let hb_writer = writer.clone();
    let hb_alive = alive.clone();
    std::thread::spawn(move || {
        let mut last = Instant::now();
        while hb_alive.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(50));
            if last.elapsed() >= HEARTBEAT_PERIOD {
                last = Instant::now();
                let msg = WireMessage::Metrics {
                    actor_id,
                    counters: counters.lock().clone(),
                };
                if write_message(&mut *hb_writer.lock(), &msg).is_err() {
                    return;
                }
            }
        }
    });
    let link = Link {
        writer,
        raw: stream,
        inbox,
        alive,
    };
    link.send(&WireMessage::Hello {
        actor_id,
        task_ids: vec![],
        protocol_version: PROTOCOL_VERSION,
    })?;
    Ok(link)
}

fn upload(link: &Link, b: &EpisodeBatch) -> Result<()> {
    if !b.records.is_empty() {
        link.send(&WireMessage::TalkTweakBatch {
            episode_id: b.episode_id,
            records: b.records.clone(),
        })?;
    }
    link.send(&WireMessage::TransitionBatch {
        task_id: b.task as u32,
        episode_id: b.episode_id,
        snapshot_version: b.snapshot_version,
        result: b.result,
        transitions: b.transitions.clone(),
    })
}

struct Client<'a> {
    addr: &'a str,
    opts: &'a ActorOptions,
    link: Option<Link>,
    outbox: VecDeque<EpisodeBatch>,
    snapshot: Option<PolicySnapshot>,
    report: ActorReport,
    counters: Arc<Mutex<Vec<(String, u64)>>>,
    shutdown: Option<String>,
    /// Set when the learner refused the connection.
    refused: Option<String>,
}

impl Client<'_> {
    fn drop_link(&mut self) {
        if let Some(l) = self.link.take() {
            l.close();
        }
    }

    /// The peer went away: read what it sent before closing (a shutdown
    /// notice, typically), then drop the link.
    fn lose_link(&mut self) {
        let Some(l) = self.link.take() else { return };
        let deadline = Instant::now() + Duration::from_millis(500);
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            match l.inbox.recv_timeout(left) {
                Ok(Incoming::Msg(m)) => self.handle(m),
                _ => break,
            }
        }
        l.close();
    }

    fn handle(&mut self, msg: WireMessage) {
        match msg {
            WireMessage::Snapshot(s) => {
                if self.snapshot.as_ref().map_or(true, |cur| s.version >= cur.version) {
                    self.snapshot = Some(*s);
                }
            }
            WireMessage::EpisodeAck { episode_id } => {
                let before = self.outbox.len();
                self.outbox.retain(|b| b.episode_id != episode_id);
                self.report.acked += (before - self.outbox.len()) as u64;
            }
            WireMessage::Shutdown { reason } => {
                if self.link.is_some() && self.snapshot.is_none() && self.report.connects == 1 {
                    self.refused = Some(reason.clone());
                }
                self.shutdown = Some(reason);
            }
            _ => {}
        }
    }

    /// Drains everything already received without blocking.
    fn poll(&mut self) {
        loop {
            let Some(link) = self.link.as_ref() else { return };
            match link.inbox.try_recv() {
                Ok(Incoming::Msg(m)) => self.handle(m),
                Ok(Incoming::Closed) | Err(mpsc::TryRecvError::Disconnected) => {
                    self.drop_link();
                    return;
                }
                Err(mpsc::TryRecvError::Empty) => return,
            }
        }
    }

    /// Blocks until `done` holds, the link drops, or shutdown.
    fn wait_until(&mut self, mut done: impl FnMut(&Self) -> bool) {
        while !done(self) && self.shutdown.is_none() {
            let Some(link) = self.link.as_ref() else { return };
            match link.inbox.recv_timeout(Duration::from_millis(100)) {
                Ok(Incoming::Msg(m)) => self.handle(m),
                Ok(Incoming::Closed) | Err(RecvTimeoutError::Disconnected) => {
                    self.drop_link();
                    return;
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
    }

    /// Connects with exponential backoff, says Hello and resends the outbox.
    fn ensure_link(&mut self) -> Result<()> {
        if self.link.is_some() {
            return Ok(());
        }
        let start = Instant::now();
        let mut delay = self.opts.backoff_initial;
        loop {
            match open_link(self.addr, self.opts.actor_id, self.counters.clone()) {
                Ok(link) => {
                    self.report.connects += 1;
                    self.link = Some(link);
                    break;
                }
                Err(e) => {
                    if start.elapsed() >= self.opts.give_up_after {
                        return Err(Error::Protocol(format!("learner at {} unreachable: {e}", self.addr)));
                    }
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(self.opts.backoff_max);
                }
            }
        }
        let pending: Vec<EpisodeBatch> = self.outbox.iter().cloned().collect();
        for b in &pending {
            let sent = self.link.as_ref().map(|l| upload(l, b));
            match sent {
                Some(Ok(())) => self.report.uploads += 1,
                _ => {
                    self.lose_link();
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}

/// Runs episodes against the learner at `addr` until it shuts the actor
/// down or `max_episodes` have been delivered. `supervisor` replaces the
/// intervention oracle (an operator session, for instance).
pub fn run_actor(
    addr: &str,
    cfg: &TrainConfig,
    env: &EnvConfig,
    opts: &ActorOptions,
    mut supervisor: Option<&mut dyn Supervisor>,
) -> Result<ActorReport> {
    let mut c = Client {
        addr,
        opts,
        link: None,
        outbox: VecDeque::new(),
        snapshot: None,
        report: ActorReport::default(),
        counters: Arc::default(),
        shutdown: None,
        refused: None,
    };
    let mut log = opts.episode_log.as_ref().map(DatasetAppender::open).transpose()?;
    let mut index = 0u64;
    loop {
        let finished = opts.max_episodes.is_some_and(|m| index >= m);
        if finished && c.outbox.is_empty() {
            break;
        }
        let offline = opts.faults.offline_episodes.contains(&index) && !finished;
        if offline {
            c.drop_link();
        } else {
            c.ensure_link()?;
            c.poll();
        }
        if let Some(reason) = c.refused.take() {
            c.drop_link();
            return Err(Error::Protocol(format!("learner refused actor {}: {reason}", opts.actor_id)));
        }
        if c.shutdown.is_some() {
            break;
        }
        if c.link.is_none() && !offline {
            continue;
        }
        if finished {
            c.wait_until(|c| c.outbox.is_empty());
            continue;
        }
        if c.link.is_some() {
            if !opts.lockstep {
                // One episode in flight: the acknowledgement carries the
                // learner's back-pressure.
                c.wait_until(|c| c.outbox.is_empty());
            }
            c.wait_until(|c| c.snapshot.is_some());
            if c.link.is_none() || c.shutdown.is_some() {
                continue;
            }
        } else if c.outbox.len() >= opts.max_buffered || c.snapshot.is_none() {
            // Offline with a full outbox (or nothing to act with): wait for
            // the link instead of collecting more.
            c.ensure_link()?;
            continue;
        }
        let snap = c.snapshot.clone().expect("snapshot present");
        let batch = run_supervised_episode(
            cfg,
            env,
            &snap,
            opts.actor_id,
            index,
            opts.pace,
            supervisor.as_mut().map(|s| &mut **s as &mut dyn Supervisor),
        )?;
        debug_assert_eq!(batch.episode_id, episode_id(opts.actor_id, index));
        if let Some(log) = log.as_mut() {
            for t in &batch.transitions {
                log.append(&Record::Transition(*t))?;
            }
            log.flush()?;
        }
        index += 1;
        c.report.episodes += 1;
        c.report.env_steps += batch.transitions.len() as u64;
        c.report.episode_versions.push((batch.episode_id, snap.version));
        *c.counters.lock() = vec![
            ("episodes".into(), c.report.episodes),
            ("env_steps".into(), c.report.env_steps),
            ("snapshot_version".into(), snap.version),
        ];
        c.outbox.push_back(batch);
        if offline {
            continue;
        }
        let b = c.outbox.back().expect("just pushed").clone();
        let sent = c.link.as_ref().map(|l| upload(l, &b));
        match sent {
            Some(Ok(())) => c.report.uploads += 1,
            _ => {
                c.lose_link();
                continue;
            }
        }
        if opts.faults.drop_after_send.contains(&(index - 1)) {
            c.drop_link();
            continue;
        }
        if opts.lockstep {
            let have = c.snapshot.as_ref().map_or(0, |s| s.version);
            if let Some(l) = c.link.as_ref() {
                if l.send(&WireMessage::SnapshotRequest { have_version: have }).is_err() {
                    c.lose_link();
                    continue;
                }
            }
            // Wait for the learner's turn to finish: its reply is either a
            // snapshot or the shutdown.
            let mut got = false;
            while !got && c.shutdown.is_none() {
                let Some(link) = c.link.as_ref() else { break };
                match link.inbox.recv() {
                    Ok(Incoming::Msg(m)) => {
                        got = matches!(m, WireMessage::Snapshot(_));
                        c.handle(m);
                    }
                    _ => c.drop_link(),
                }
            }
        }
    }
    if let Some(l) = c.link.take() {
        let _ = l.send(&WireMessage::Shutdown {
            reason: "actor finished".into(),
        });
        l.close();
    }
    c.report.shutdown_reason = c.shutdown;
    Ok(c.report)
}
