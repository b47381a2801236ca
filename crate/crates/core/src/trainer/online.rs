//! Demonstration collection, the warm-up phase and the online phase.
//!
//! The online phase has one learning context and one interaction context
//! per actor. They share only the replay buffer (behind a lock) and the
//! snapshot cell. [`OnlineMode::Deterministic`] interleaves them on one
//! thread: each finished episode is ingested, then the learner catches up to
//! the update budget and publishes a snapshot.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::domain::{Action, Observation, TalkTweakRecord, TaskSpec, Transition};
use crate::env::{
    rollout, rollout_supervised, EnvConfig, EpisodeResult, ExpertPolicy, InterventionOracle, Policy, Scene, Supervisor,
};
use crate::error::{Error, Result};
use crate::numerics::SimRng;
use crate::replay::ReplayBuffer;
use crate::talk_tweak::annotate;

use super::eval::{evaluate, CommandSource, SnapshotPolicy};
use super::{Learner, MetricsLog, MetricsRecord, PolicySnapshot, TrainConfig};

const DEMO_SALT: u64 = 0xD3E0_5A17;
const EPISODE_SALT: u64 = 0xE915_0DE5;
const EVAL_SALT: u64 = 0xE7A1_5EED;

/// `demos_per_task` successful noisy-expert episodes per task, task-major.
/// Failed attempts are redrawn with a fresh seed.
pub fn collect_demos(cfg: &TrainConfig) -> Result<Vec<Vec<Transition>>> {
    let env = &cfg.env;
    let mut seeds = SimRng::seed_from(cfg.seed ^ DEMO_SALT);
    let mut out = Vec::with_capacity(env.n_tasks() * cfg.demos_per_task);
    for task in 0..env.n_tasks() {
        let mut kept = 0;
        let mut attempts = 0;
        while kept < cfg.demos_per_task {
            if attempts >= 10 * cfg.demos_per_task {
                return Err(Error::Env(format!(
                    "expert succeeded {kept} of {attempts} times on task {task}; check the environment config"
                )));
            }
            attempts += 1;
            let mut scene = Scene::reset(env, task, seeds.next_u64())?;
            let mut expert = ExpertPolicy::noisy(env, seeds.next_u64());
            let ep = rollout(&mut scene, &mut expert, None)?;
            if ep.result.success {
                out.push(ep.transitions);
                kept += 1;
            }
        }
    }
    Ok(out)
}

/// Runs `steps` warm-up updates and returns the resulting snapshot.
pub fn warmup_phase(
    learner: &mut Learner,
    buffer: &ReplayBuffer,
    steps: usize,
    metrics: &mut MetricsLog,
) -> Result<PolicySnapshot> {
    let start = Instant::now();
    for i in 0..steps {
        let log = learner.warmup_step(buffer)?;
        if (i + 1) % 100 == 0 || i + 1 == steps {
            metrics.log(&MetricsRecord {
                phase: "warmup".into(),
                step: 0,
                updates: learner.updates,
                critic_loss: log.critic_loss,
                actor_loss: log.actor_loss,
                bc: log.bc,
                q_term: log.q_term,
                q_bars: log.q_bars,
                task_weights: log.task_weights,
                lambda: log.lambda,
                wall_s: start.elapsed().as_secs_f64(),
                ..Default::default()
            })?;
        }
    }
    metrics.flush()?;
    Ok(learner.snapshot())
}

/// Single-writer, multi-reader versioned snapshot slot. Older versions are
/// never installed over newer ones.
pub struct SnapshotCell {
    inner: RwLock<Arc<PolicySnapshot>>,
}

impl SnapshotCell {
    pub fn new(snap: PolicySnapshot) -> Self {
        Self {
            inner: RwLock::new(Arc::new(snap)),
        }
    }

    pub fn latest(&self) -> Arc<PolicySnapshot> {
        self.inner.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.inner.read().version
    }

    pub fn publish(&self, snap: PolicySnapshot) -> bool {
        let mut slot = self.inner.write();
        if snap.version < slot.version {
            return false;
        }
        *slot = Arc::new(snap);
        true
    }
}

/// One finished episode as shipped from an interaction context.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub episode_id: u64,
    pub actor_id: u32,
    pub task: usize,
    pub snapshot_version: u64,
    pub transitions: Vec<Transition>,
    pub records: Vec<TalkTweakRecord>,
    pub result: EpisodeResult,
}

pub fn episode_id(actor_id: u32, index: u64) -> u64 {
    ((actor_id as u64) << 40) | index
}

struct PacedPolicy<'a> {
    inner: &'a mut dyn Policy,
    pace: Option<Duration>,
}

impl Policy for PacedPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        if let Some(p) = self.pace {
            std::thread::sleep(p);
        }
        self.inner.act(obs)
    }

    fn begin_episode(&mut self, task: &TaskSpec) {
        self.inner.begin_episode(task)
    }
}

/// Runs episode `index` of actor `actor_id` with the oracle standing in for
/// the human, and annotates it. Task, scene, policy noise and oracle noise
/// all derive from `(seed, actor_id, index)`.
pub fn run_interaction_episode(
    cfg: &TrainConfig,
    env: &EnvConfig,
    snapshot: &PolicySnapshot,
    actor_id: u32,
    index: u64,
    pace: Option<Duration>,
) -> Result<EpisodeBatch> {
    run_supervised_episode(cfg, env, snapshot, actor_id, index, pace, None)
}

/// [`run_interaction_episode`] with the oracle replaced by `supervisor`
/// when one is given (an operator session, for instance). Seeds are drawn
/// identically either way.
pub fn run_supervised_episode(
    cfg: &TrainConfig,
    env: &EnvConfig,
    snapshot: &PolicySnapshot,
    actor_id: u32,
    index: u64,
    pace: Option<Duration>,
    supervisor: Option<&mut dyn Supervisor>,
) -> Result<EpisodeBatch> {
    let n = env.n_tasks() as u64;
    let task = ((index + actor_id as u64) % n) as usize;
    let mut seeds = SimRng::seed_from(cfg.seed ^ EPISODE_SALT ^ episode_id(actor_id, index).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut scene = Scene::reset(env, task, seeds.next_u64())?;
    let mut policy = SnapshotPolicy::primary(snapshot.actor.clone(), seeds.next_u64());
    let mut paced = PacedPolicy {
        inner: &mut policy,
        pace,
    };
    let mut oracle = InterventionOracle::new(env);
    let mut oracle_rng = seeds.fork(1);
    let ep = match supervisor {
        Some(s) => {
            s.episode_context(episode_id(actor_id, index), snapshot.version);
            rollout_supervised(&mut scene, &mut paced, Some(s))?
        }
        None => rollout(&mut scene, &mut paced, Some((&mut oracle, &mut oracle_rng)))?,
    };
    let records = if cfg.disable_talk_annotation {
        Vec::new()
    } else {
        annotate(&ep.transitions, &cfg.talk)
    };
    Ok(EpisodeBatch {
        episode_id: episode_id(actor_id, index),
        actor_id,
        task,
        snapshot_version: snapshot.version,
        transitions: ep.transitions,
        records,
        result: ep.result,
    })
}

/// State the learning and interaction contexts meet at.
pub struct SharedState {
    pub buffer: RwLock<ReplayBuffer>,
    pub snapshots: SnapshotCell,
    pub env_steps: AtomicU64,
    pub intervened_steps: AtomicU64,
    pub episodes: AtomicU64,
    pub online_updates: AtomicU64,
    pub stop: AtomicBool,
    success_ema: Mutex<Vec<f64>>,
}

impl SharedState {
    pub fn new(buffer: ReplayBuffer, snapshot: PolicySnapshot) -> Self {
        let n = buffer.n_tasks();
        Self {
            buffer: RwLock::new(buffer),
            snapshots: SnapshotCell::new(snapshot),
            env_steps: AtomicU64::new(0),
            intervened_steps: AtomicU64::new(0),
            episodes: AtomicU64::new(0),
            online_updates: AtomicU64::new(0),
            stop: AtomicBool::new(false),
            success_ema: Mutex::new(vec![0.0; n]),
        }
    }

    /// Stores an episode exactly once; a repeated `episode_id` is ignored
    /// and reported as `false`.
    pub fn ingest(&self, batch: &EpisodeBatch) -> Result<bool> {
        {
            let mut buf = self.buffer.write();
            if buf.is_merged(batch.episode_id) {
                return Ok(false);
            }
            buf.ingest_episode(batch.episode_id, &batch.transitions, &batch.records)?;
        }
        let steps = batch.transitions.len() as u64;
        self.env_steps.fetch_add(steps, Ordering::SeqCst);
        self.intervened_steps
            .fetch_add(batch.result.interventions as u64, Ordering::SeqCst);
        self.episodes.fetch_add(1, Ordering::SeqCst);
        let mut ema = self.success_ema.lock();
        if let Some(e) = ema.get_mut(batch.task) {
            *e = 0.9 * *e + 0.1 * if batch.result.success { 1.0 } else { 0.0 };
        }
        Ok(true)
    }

    pub fn success_ema(&self) -> Vec<f64> {
        self.success_ema.lock().clone()
    }

    pub fn intervention_fraction(&self) -> f64 {
        let steps = self.env_steps.load(Ordering::SeqCst);
        if steps == 0 {
            0.0
        } else {
            self.intervened_steps.load(Ordering::SeqCst) as f64 / steps as f64
        }
    }

    pub fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    /// Stop once every task reaches the target success rate.
    AllTasks,
    /// Stop once the task-averaged success rate reaches the target.
    MeanOverTasks,
    /// Run to the environment-step budget.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OnlineMode {
    /// Single thread, fixed round-robin over actors; bit-reproducible.
    Deterministic { actors: u32 },
    /// One thread per actor plus the learner. `pace` is slept before every
    /// control step; actors wait when they lead the learner's update budget
    /// by more than `max_lag` environment steps.
    Threaded { actors: u32, pace: Duration, max_lag: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: u64,
    pub wall_s: f64,
    pub success: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineReport {
    pub env_steps: u64,
    pub online_updates: u64,
    pub episodes: u64,
    pub intervention_fraction: f64,
    pub wall_s: f64,
    pub evals: Vec<EvalPoint>,
    /// First evaluation where the task average reached the target.
    pub reached_mean: Option<EvalPoint>,
    /// First evaluation where every task reached the target.
    pub reached_all: Option<EvalPoint>,
    pub snapshot: PolicySnapshot,
}

/// The learning context: the update budget, snapshot publication,
/// periodic evaluation and metrics.
pub struct LearningContext<'a> {
    pub learner: &'a mut Learner,
    pub shared: &'a SharedState,
    pub metrics: &'a mut MetricsLog,
    pub stop_rule: StopRule,
    start: Instant,
    next_eval: u64,
    evals: Vec<EvalPoint>,
    reached_mean: Option<EvalPoint>,
    reached_all: Option<EvalPoint>,
}

impl<'a> LearningContext<'a> {
    pub fn new(learner: &'a mut Learner, shared: &'a SharedState, metrics: &'a mut MetricsLog, stop_rule: StopRule) -> Self {
        let next_eval = learner.cfg.eval_every as u64;
        Self {
            learner,
            shared,
            metrics,
            stop_rule,
            start: Instant::now(),
            next_eval,
            evals: Vec::new(),
            reached_mean: None,
            reached_all: None,
        }
    }

    pub fn gate_open(&self) -> bool {
        self.shared.buffer.read().min_rollouts() >= self.learner.cfg.online_gate
    }

    fn budget(&self) -> u64 {
        let steps = self.shared.env_steps.load(Ordering::SeqCst);
        (steps as f64 * self.learner.cfg.updates_per_step).floor() as u64
    }

    pub fn publish(&self) {
        self.shared.snapshots.publish(self.learner.snapshot());
    }

    /// One online update if the gate is open and the budget allows.
    pub fn try_update(&mut self) -> Result<bool> {
        let done = self.shared.online_updates.load(Ordering::SeqCst);
        if done >= self.budget() || !self.gate_open() {
            return Ok(false);
        }
        let log = {
            let buf = self.shared.buffer.read();
            self.learner.online_step(&buf)?
        };
        let done = self.shared.online_updates.fetch_add(1, Ordering::SeqCst) + 1;
        if done % self.learner.cfg.snapshot_period as u64 == 0 {
            self.publish();
        }
        if done % 250 == 0 {
            self.metrics.log(&MetricsRecord {
                phase: "online".into(),
                step: self.shared.env_steps.load(Ordering::SeqCst),
                updates: self.learner.updates,
                success_ema: self.shared.success_ema(),
                critic_loss: log.critic_loss,
                actor_loss: log.actor_loss,
                bc: log.bc,
                q_term: log.q_term,
                q_bars: log.q_bars,
                task_weights: log.task_weights,
                lambda: log.lambda,
                refine: log.refine,
                intervention_fraction: self.shared.intervention_fraction(),
                eval_success: None,
                wall_s: self.start.elapsed().as_secs_f64(),
                counters: Default::default(),
            })?;
        }
        Ok(true)
    }

    /// Runs updates until the budget is spent.
    pub fn catch_up(&mut self) -> Result<u64> {
        let mut n = 0;
        while self.try_update()? {
            n += 1;
        }
        Ok(n)
    }

    /// Evaluates once the step counter passes the next checkpoint; returns
    /// whether the stop rule is satisfied.
    pub fn maybe_eval(&mut self) -> Result<bool> {
        let steps = self.shared.env_steps.load(Ordering::SeqCst);
        if steps < self.next_eval {
            return Ok(false);
        }
        while self.next_eval <= steps {
            self.next_eval += self.learner.cfg.eval_every.max(1) as u64;
        }
        let cfg = &self.learner.cfg;
        let report = evaluate(
            &self.learner.snapshot(),
            &cfg.env,
            cfg.eval_trials,
            false,
            CommandSource::Oracle,
            cfg.seed ^ EVAL_SALT,
        )?;
        let point = EvalPoint {
            env_steps: steps,
            wall_s: self.start.elapsed().as_secs_f64(),
            success: report.success_rates(),
        };
        self.metrics.log(&MetricsRecord {
            phase: "eval".into(),
            step: steps,
            updates: self.learner.updates,
            success_ema: self.shared.success_ema(),
            intervention_fraction: self.shared.intervention_fraction(),
            eval_success: Some(point.success.clone()),
            wall_s: point.wall_s,
            ..Default::default()
        })?;
        self.metrics.flush()?;
        let target = cfg.target_success;
        if self.reached_mean.is_none() && report.mean_success() >= target {
            self.reached_mean = Some(point.clone());
        }
        if self.reached_all.is_none() && report.min_success() >= target {
            self.reached_all = Some(point.clone());
        }
        self.evals.push(point);
        Ok(match self.stop_rule {
            StopRule::AllTasks => self.reached_all.is_some(),
            StopRule::MeanOverTasks => self.reached_mean.is_some(),
            StopRule::Never => false,
        })
    }

    pub fn budget_exhausted(&self) -> bool {
        self.shared.env_steps.load(Ordering::SeqCst) >= self.learner.cfg.max_env_steps as u64
    }

    pub fn finish(self) -> OnlineReport {
        self.publish();
        let s = self.shared;
        OnlineReport {
            env_steps: s.env_steps.load(Ordering::SeqCst),
            online_updates: s.online_updates.load(Ordering::SeqCst),
            episodes: s.episodes.load(Ordering::SeqCst),
            intervention_fraction: s.intervention_fraction(),
            wall_s: self.start.elapsed().as_secs_f64(),
            evals: self.evals,
            reached_mean: self.reached_mean,
            reached_all: self.reached_all,
            snapshot: self.learner.snapshot(),
        }
    }
}

/// Runs the online phase from the learner's current state. Returns the
/// report and the final buffer contents.
pub fn online_phase(
    learner: &mut Learner,
    buffer: ReplayBuffer,
    mode: OnlineMode,
    stop_rule: StopRule,
    metrics: &mut MetricsLog,
) -> Result<(OnlineReport, ReplayBuffer)> {
    let shared = SharedState::new(buffer, learner.snapshot());
    let report = match mode {
        OnlineMode::Deterministic { actors } => run_deterministic(learner, &shared, actors.max(1), stop_rule, metrics)?,
        OnlineMode::Threaded { actors, pace, max_lag } => {
            if actors == 0 {
                return Err(Error::InvalidArgument("threaded online phase needs at least one actor".into()));
            }
            run_threaded(learner, &shared, actors, pace, max_lag, stop_rule, metrics)?
        }
    };
    Ok((report, shared.buffer.into_inner()))
}

fn run_deterministic(
    learner: &mut Learner,
    shared: &SharedState,
    actors: u32,
    stop_rule: StopRule,
    metrics: &mut MetricsLog,
) -> Result<OnlineReport> {
    let cfg = learner.cfg.clone();
    let mut ctx = LearningContext::new(learner, shared, metrics, stop_rule);
    let mut index = 0u64;
    'outer: loop {
        for actor_id in 0..actors {
            if ctx.budget_exhausted() {
                break 'outer;
            }
            let snap = shared.snapshots.latest();
            let batch = run_interaction_episode(&cfg, &cfg.env, &snap, actor_id, index, None)?;
            shared.ingest(&batch)?;
            serial_learner_turn(&mut ctx)?;
            if ctx.maybe_eval()? {
                break 'outer;
            }
        }
        index += 1;
    }
    Ok(ctx.finish())
}

/// The learner's share of one serialized round: spend the update budget and
/// publish. Shared by the in-process and networked serialized modes.
pub fn serial_learner_turn(ctx: &mut LearningContext<'_>) -> Result<u64> {
    let n = ctx.catch_up()?;
    ctx.publish();
    Ok(n)
}

fn run_threaded(
    learner: &mut Learner,
    shared: &SharedState,
    actors: u32,
    pace: Duration,
    max_lag: u64,
    stop_rule: StopRule,
    metrics: &mut MetricsLog,
) -> Result<OnlineReport> {
    let cfg = learner.cfg.clone();
    let utd = cfg.updates_per_step;
    let max_steps = cfg.max_env_steps as u64;
    std::thread::scope(|scope| -> Result<OnlineReport> {
        let mut handles = Vec::new();
        for actor_id in 0..actors {
            let cfg = &cfg;
            handles.push(scope.spawn(move || -> Result<()> {
                let mut index = 0u64;
                let gate = cfg.online_gate;
                while !shared.stopped() {
                    if shared.env_steps.load(Ordering::SeqCst) >= max_steps {
                        break;
                    }
                    // Back-pressure keeps the update-to-data ratio.
                    while utd > 0.0 && !shared.stopped() && shared.buffer.read().min_rollouts() >= gate {
                        let steps = shared.env_steps.load(Ordering::SeqCst);
                        let covered = (shared.online_updates.load(Ordering::SeqCst) as f64 / utd) as u64;
                        if steps <= covered + max_lag {
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(1));
                    }
                    let snap = shared.snapshots.latest();
                    let batch = run_interaction_episode(cfg, &cfg.env, &snap, actor_id, index, Some(pace))?;
                    if shared.stopped() && shared.env_steps.load(Ordering::SeqCst) >= max_steps {
                        break;
                    }
                    shared.ingest(&batch)?;
                    index += 1;
                }
                Ok(())
            }));
        }
        let mut ctx = LearningContext::new(learner, shared, metrics, stop_rule);
        let result = (|| -> Result<()> {
            loop {
                if handles.iter().all(|h| h.is_finished()) {
                    ctx.catch_up()?;
                    ctx.maybe_eval()?;
                    return Ok(());
                }
                let worked = ctx.try_update()?;
                if ctx.maybe_eval()? || ctx.budget_exhausted() {
                    return Ok(());
                }
                if !worked {
                    std::thread::sleep(Duration::from_millis(1));
                }
            }
        })();
        shared.stop.store(true, Ordering::SeqCst);
        for h in handles {
            h.join().map_err(|_| Error::Env("actor thread panicked".into()))??;
        }
        result?;
        Ok(ctx.finish())
    })
}
