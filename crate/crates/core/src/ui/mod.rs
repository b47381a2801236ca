//! Operator channel served by an actor process.
//!
//! One TCP port serves the static control page (`GET /`) and a websocket
//! endpoint (any upgrade request; the page uses `/ws`). Each websocket text
//! frame carries one or more newline-terminated JSON objects, each a
//! [`UiMessage`] tagged by its `"type"` field:
//!
//! ```text
//! -> {"type":"ModeToggle","intervene":true}
//! <- {"type":"Ack","ref":1}
//! -> {"type":"TweakInput","dpos":[0.01,0.0,0.0],"drot":[0.0,0.0,0.0],"grip":0.0}
//! <- {"type":"Ack","ref":2}
//! -> {"type":"TalkInput","command_text":"move sideways"}
//! <- {"type":"Rejected","ref":3,"reason":"..."}
//! <- {"type":"SceneState","step":4,"ee_pose":[...],"grip":0.0,"object_pose":[...],
//!     "goal_pose":[...],"attached":false,"mode":"intervene","episode_id":7,
//!     "task_id":1,"snapshot_version":3}
//! ```
//!
//! `ref` is the 1-based position of the inbound message within the session.
//! Every inbound message is answered by exactly one `Ack` or `Rejected`.
//! Only one session is admitted at a time; a second connection receives a
//! `Rejected` without `ref` and is closed.
//!
//! A `TweakInput` is accepted only while intervention mode is on. Accepted
//! tweaks are queued and each one replaces the policy action of exactly one
//! later step, re-clamped to the action bounds. While the mode is on and the
//! queue is empty a step waits up to `tweak_wait` for input before letting
//! the policy act.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::actors::DualActor;
use crate::domain::{parse_command, Action, GripState, Observation, RefinementCommand, TaskSpec, Transition};
use crate::env::{rollout_supervised, EnvConfig, Policy, Scene, Supervisor};
use crate::error::{Error, Result};
use crate::numerics::SimRng;
use crate::trainer::{EvalReport, PolicySnapshot, TaskEval};

/// The control page.
pub const PAGE: &str = include_str!("page.html");

const MAX_QUEUED_COMMANDS: usize = 16;
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Policy,
    Intervene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub step: u32,
    pub ee_pose: [f64; 6],
    /// 1 when the gripper is closed.
    pub grip: f64,
    pub object_pose: [f64; 6],
    pub goal_pose: [f64; 6],
    pub attached: bool,
    pub mode: Mode,
    pub episode_id: u64,
    pub task_id: usize,
    pub snapshot_version: u64,
}

impl SceneState {
    pub fn from_observation(obs: &Observation, mode: Mode, episode_id: u64, snapshot_version: u64) -> Self {
        let [x, y, z] = obs.ee_pos;
        let [r, p, w] = obs.ee_rpy;
        Self {
            step: obs.step_index,
            ee_pose: [x, y, z, r, p, w],
            grip: if obs.grip_state == GripState::Closed { 1.0 } else { 0.0 },
            object_pose: obs.object_pose,
            goal_pose: obs.goal_pose,
            attached: obs.attached,
            mode,
            episode_id,
            task_id: obs.task_id,
            snapshot_version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum UiMessage {
    SceneState(SceneState),
    TweakInput {
        dpos: [f64; 3],
        drot: [f64; 3],
        grip: f64,
    },
    TalkInput {
        command_text: String,
    },
    ModeToggle {
        intervene: bool,
    },
    ResetRequest,
    Ack {
        #[serde(rename = "ref")]
        reference: u64,
    },
    Rejected {
        #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
        reference: Option<u64>,
        reason: String,
    },
}

impl UiMessage {
    /// One JSON object followed by `\n`.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("UiMessage serializes");
        s.push('\n');
        s
    }

    /// Parses every non-blank line of a text frame.
    pub fn parse_lines(text: &str) -> Result<Vec<UiMessage>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("bad UI message {l:?}: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UiConfig {
    pub addr: String,
    /// Minimum wall time per environment step.
    pub step_period: Duration,
    /// How long an intervening step waits for a tweak.
    pub tweak_wait: Duration,
    /// Steps a talk command stays active in evaluation.
    pub command_hold: usize,
    /// Operator events are appended here as JSON lines.
    pub session_log: Option<PathBuf>,
}

impl Default for UiConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8765".into(),
            step_period: Duration::from_millis(100),
            tweak_wait: Duration::from_millis(100),
            command_hold: 5,
            session_log: None,
        }
    }
}

#[derive(Default)]
struct UiState {
    intervene: bool,
    tweaks: VecDeque<Action>,
    commands: VecDeque<RefinementCommand>,
    reset: bool,
    session: Option<(u64, Sender<UiMessage>)>,
    sessions: u64,
}

struct Shared {
    cfg: UiConfig,
    state: Mutex<UiState>,
    changed: Condvar,
    stop: AtomicBool,
    log: Mutex<Option<BufWriter<File>>>,
    started: Instant,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, UiState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn log_event(&self, session: u64, event: &str, message: Option<&UiMessage>, outcome: &str) {
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(w) = log.as_mut() {
            let rec = serde_json::json!({
                "ms": self.started.elapsed().as_millis() as u64,
                "session": session,
                "event": event,
                "message": message,
                "outcome": outcome,
            });
            let _ = writeln!(w, "{rec}").and_then(|_| w.flush());
        }
    }
}

/// Cloneable view of the operator channel used by the actor side.
#[derive(Clone)]
pub struct UiHandle {
    shared: Arc<Shared>,
}

impl UiHandle {
    pub fn connected(&self) -> bool {
        self.shared.lock().session.is_some()
    }

    pub fn intervening(&self) -> bool {
        self.shared.lock().intervene
    }

    pub fn queued_tweaks(&self) -> usize {
        self.shared.lock().tweaks.len()
    }

    /// Next talk command received from the operator, if any.
    pub fn take_command(&self) -> Option<RefinementCommand> {
        self.shared.lock().commands.pop_front()
    }

    /// Sends a message to the connected operator; a no-op without one.
    pub fn publish(&self, msg: UiMessage) {
        if let Some((_, tx)) = self.shared.lock().session.as_ref() {
            let _ = tx.send(msg);
        }
    }

    /// Blocks until an operator session is connected or `timeout` passes.
    pub fn wait_for_session(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.lock();
        while st.session.is_none() {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self
                .shared
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        true
    }

    /// A supervisor that lets the operator take over when intervention mode
    /// is on.
    pub fn supervisor(&self) -> UiSupervisor {
        UiSupervisor {
            ui: self.clone(),
            allow_intervention: true,
            episode_id: 0,
            snapshot_version: 0,
            step_started: None,
        }
    }

    /// A supervisor that only streams the scene (evaluation).
    pub fn observer(&self) -> UiSupervisor {
        UiSupervisor {
            allow_intervention: false,
            ..self.supervisor()
        }
    }
}

/// Bridges a rollout to the operator: streams a [`SceneState`] per step,
/// applies accepted tweaks, paces steps and honours reset requests.
pub struct UiSupervisor {
    ui: UiHandle,
    allow_intervention: bool,
    episode_id: u64,
    snapshot_version: u64,
    step_started: Option<Instant>,
}

impl UiSupervisor {
    fn emit(&self, obs: &Observation) {
        let mode = if self.allow_intervention && self.ui.intervening() {
            Mode::Intervene
        } else {
            Mode::Policy
        };
        self.ui.publish(UiMessage::SceneState(SceneState::from_observation(
            obs,
            mode,
            self.episode_id,
            self.snapshot_version,
        )));
    }
}

impl Supervisor for UiSupervisor {
    fn episode_context(&mut self, episode_id: u64, snapshot_version: u64) {
        self.episode_id = episode_id;
        self.snapshot_version = snapshot_version;
    }

    fn begin_episode(&mut self, scene: &Scene) {
        self.ui.shared.lock().reset = false;
        self.step_started = None;
        self.emit(&scene.observation());
    }

    fn abort_episode(&mut self) -> bool {
        std::mem::take(&mut self.ui.shared.lock().reset)
    }

    fn supervise(&mut self, _scene: &Scene, _obs: &Observation, _proposed: &Action) -> Result<Option<Action>> {
        self.step_started = Some(Instant::now());
        if !self.allow_intervention {
            return Ok(None);
        }
        let shared = &self.ui.shared;
        let deadline = Instant::now() + shared.cfg.tweak_wait;
        let mut st = shared.lock();
        loop {
            if let Some(a) = st.tweaks.pop_front() {
                return Ok(Some(a));
            }
            let now = Instant::now();
            if !st.intervene || st.reset || now >= deadline || shared.stop.load(Ordering::SeqCst) {
                return Ok(None);
            }
            st = shared
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn after_step(&mut self, scene: &Scene, _transition: &Transition) {
        self.emit(&scene.observation());
        if let Some(t0) = self.step_started.take() {
            let period = self.ui.shared.cfg.step_period;
            let spent = t0.elapsed();
            if spent < period {
                std::thread::sleep(period - spent);
            }
        }
    }
}

/// Primary-mode policy that turns operator talk commands into refinement
/// commands, each held for `hold` steps.
pub struct OperatorPolicy {
    pub actor: DualActor,
    pub rng: SimRng,
    pub hold: usize,
    pub issued: usize,
    ui: UiHandle,
    active: Option<(RefinementCommand, usize)>,
}

impl OperatorPolicy {
    pub fn new(actor: DualActor, seed: u64, ui: UiHandle) -> Self {
        let hold = ui.shared.cfg.command_hold.max(1);
        Self {
            actor,
            rng: SimRng::seed_from(seed),
            hold,
            issued: 0,
            ui,
            active: None,
        }
    }
}

impl Policy for OperatorPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        if let Some(cmd) = self.ui.take_command() {
            self.issued += 1;
            self.active = Some((cmd, self.hold));
        }
        let cmd = self.active.map(|(c, _)| c);
        self.active = match self.active {
            Some((c, left)) if left > 1 => Some((c, left - 1)),
            _ => None,
        };
        self.actor.act(obs, cmd.as_ref(), &mut self.rng)
    }

    fn begin_episode(&mut self, _task: &TaskSpec) {
        self.active = None;
    }
}

/// Evaluation with commands from the operator: same scene seeds as
/// [`crate::trainer::evaluate_policy`], every step streamed to the page.
pub fn evaluate_with_operator(
    snapshot: &PolicySnapshot,
    env: &EnvConfig,
    n_trials: usize,
    seed: u64,
    ui: &UiHandle,
) -> Result<EvalReport> {
    let mut policy = OperatorPolicy::new(snapshot.actor.clone(), seed ^ 0x5EED_0F_E7A1, ui.clone());
    let mut watch = ui.observer();
    let mut tasks = Vec::with_capacity(env.n_tasks());
    for task in 0..env.n_tasks() {
        let mut seeds = SimRng::seed_from(seed ^ (task as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let (mut successes, mut total_len) = (0usize, 0u64);
        for trial in 0..n_trials {
            let mut scene = Scene::reset(env, task, seeds.next_u64())?;
            watch.episode_context(trial as u64, snapshot.version);
            let ep = rollout_supervised(&mut scene, &mut policy, Some(&mut watch))?;
            successes += ep.result.success as usize;
            total_len += ep.result.length as u64;
        }
        tasks.push(TaskEval {
            task,
            name: env.task(task)?.name.clone(),
            trials: n_trials,
            successes,
            success_rate: successes as f64 / n_trials.max(1) as f64,
            mean_length: total_len as f64 / n_trials.max(1) as f64,
        });
    }
    Ok(EvalReport {
        use_refinement: true,
        tasks,
        commands_issued: policy.issued,
    })
}

/// The page and websocket server. Dropping it stops serving.
pub struct UiServer {
    handle: UiHandle,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
}

impl UiServer {
    pub fn start(cfg: UiConfig) -> Result<Self> {
        let listener = TcpListener::bind(&cfg.addr)
            .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("cannot bind UI port {}: {e}", cfg.addr))))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let log = match &cfg.session_log {
            Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        let shared = Arc::new(Shared {
            cfg,
            state: Mutex::new(UiState::default()),
            changed: Condvar::new(),
            stop: AtomicBool::new(false),
            log: Mutex::new(log),
            started: Instant::now(),
        });
        let s = shared.clone();
        let accept = std::thread::spawn(move || accept_loop(listener, s));
        Ok(Self {
            handle: UiHandle { shared },
            addr,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn handle(&self) -> UiHandle {
        self.handle.clone()
    }

    pub fn shutdown(&mut self) {
        self.handle.shared.stop.store(true, Ordering::SeqCst);
        self.handle.shared.changed.notify_all();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for UiServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let s = shared.clone();
                workers.push(std::thread::spawn(move || {
                    let _ = serve_connection(stream, &s);
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(_) => std::thread::sleep(POLL),
        }
        workers.retain(|w| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// The request head, peeked so a websocket handshake can still read it.
fn peek_head(stream: &TcpStream) -> io::Result<(String, usize)> {
    let deadline = Instant::now() + Duration::from_secs(2);
    let mut buf = vec![0u8; 8192];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        if let Some(end) = find(&buf[..n], b"\r\n\r\n") {
            return Ok((String::from_utf8_lossy(&buf[..end]).into_owned(), end + 4));
        }
        if n == buf.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large"));
        }
        if Instant::now() >= deadline {
            return Err(io::ErrorKind::TimedOut.into());
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn is_upgrade(head: &str) -> bool {
    head.lines().skip(1).any(|l| {
        let l = l.to_ascii_lowercase();
        l.starts_with("upgrade:") && l.contains("websocket")
    })
}

fn serve_connection(mut stream: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let (head, len) = peek_head(&stream)?;
    if is_upgrade(&head) {
        return serve_session(stream, shared);
    }
    let mut consumed = vec![0u8; len];
    stream.read_exact(&mut consumed)?;
    let mut parts = head.lines().next().unwrap_or("").split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    let (status, body) = match (method, path.split('?').next().unwrap_or("")) {
        ("GET", "/" | "/index.html") => ("200 OK", PAGE),
        ("GET", _) => ("404 Not Found", "not found\n"),
        _ => ("405 Method Not Allowed", "method not allowed\n"),
    };
    let ctype = if status.starts_with("200") { "text/html; charset=utf-8" } else { "text/plain" };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &UiMessage) -> tungstenite::Result<()> {
    ws.send(Message::text(msg.to_line()))
}

fn serve_session(stream: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    let (tx, rx) = mpsc::channel();
    let id = {
        let mut st = shared.lock();
        if st.session.is_some() {
            drop(st);
            let reason = "another operator session is already connected".to_string();
            shared.log_event(0, "refused", None, &reason);
            let _ = send(&mut ws, &UiMessage::Rejected { reference: None, reason });
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        st.sessions += 1;
        let id = st.sessions;
        st.session = Some((id, tx));
        id
    };
    shared.changed.notify_all();
    shared.log_event(id, "connected", None, "accepted");
    ws.get_mut().set_read_timeout(Some(POLL))?;
    let result = session_loop(&mut ws, &rx, shared, id);
    {
        let mut st = shared.lock();
        if st.session.as_ref().is_some_and(|(s, _)| *s == id) {
            st.session = None;
        }
        st.intervene = false;
    }
    shared.changed.notify_all();
    shared.log_event(id, "disconnected", None, "intervention mode off");
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn session_loop(ws: &mut WebSocket<TcpStream>, rx: &Receiver<UiMessage>, shared: &Shared, id: u64) -> io::Result<()> {
    let mut seq = 0u64;
    let io_err = |e: tungstenite::Error| io::Error::other(e.to_string());
    while !shared.stop.load(Ordering::SeqCst) {
        while let Ok(msg) = rx.try_recv() {
            send(ws, &msg).map_err(io_err)?;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    seq += 1;
                    let reply = handle_inbound(shared, id, seq, line);
                    send(ws, &reply).map_err(io_err)?;
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(io_err(e)),
        }
    }
    Ok(())
}

fn handle_inbound(shared: &Shared, id: u64, seq: u64, line: &str) -> UiMessage {
    let reject = |reason: String| UiMessage::Rejected {
        reference: Some(seq),
        reason,
    };
    let msg: UiMessage = match serde_json::from_str(line) {
        Ok(m) => m,
        Err(e) => {
            let reason = format!("unparseable message: {e}");
            shared.log_event(id, "invalid", None, &reason);
            return reject(reason);
        }
    };
    let outcome: std::result::Result<&str, String> = {
        let mut st = shared.lock();
        match &msg {
            UiMessage::TweakInput { dpos, drot, grip } => {
                let a = Action {
                    dpos: *dpos,
                    drot: *drot,
                    grip: *grip,
                };
                if !a.is_finite() {
                    Err("tweak has non-finite values".into())
                } else if !st.intervene {
                    Err("intervention mode is off; tweak ignored".into())
                } else {
                    st.tweaks.push_back(a.clamped());
                    Ok("queued")
                }
            }
            UiMessage::TalkInput { command_text } => match parse_command(command_text) {
                Ok(cmd) => {
                    if st.commands.len() >= MAX_QUEUED_COMMANDS {
                        st.commands.pop_front();
                    }
                    st.commands.push_back(cmd);
                    Ok("queued")
                }
                Err(e) => Err(e.to_string()),
            },
            UiMessage::ModeToggle { intervene } => {
                st.intervene = *intervene;
                Ok(if *intervene { "intervention on" } else { "intervention off" })
            }
            UiMessage::ResetRequest => {
                st.reset = true;
                Ok("reset requested")
            }
            UiMessage::SceneState(_) | UiMessage::Ack { .. } | UiMessage::Rejected { .. } => {
                Err(format!("{} is not an operator message", type_name(&msg)))
            }
        }
    };
    shared.changed.notify_all();
    match outcome {
        Ok(o) => {
            shared.log_event(id, "input", Some(&msg), o);
            UiMessage::Ack { reference: seq }
        }
        Err(reason) => {
            shared.log_event(id, "input", Some(&msg), &reason);
            reject(reason)
        }
    }
}

fn type_name(msg: &UiMessage) -> &'static str {
    match msg {
        UiMessage::SceneState(_) => "SceneState",
        UiMessage::TweakInput { .. } => "TweakInput",
        UiMessage::TalkInput { .. } => "TalkInput",
        UiMessage::ModeToggle { .. } => "ModeToggle",
        UiMessage::ResetRequest => "ResetRequest",
        UiMessage::Ack { .. } => "Ack",
        UiMessage::Rejected { .. } => "Rejected",
    }
}
