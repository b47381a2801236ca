//! Centralized learner with decentralized actors over TCP.

mod actor;
mod learner;
pub mod protocol;
mod registry;

pub use actor::{run_actor, ActorOptions, ActorReport, Faults};
pub use learner::{probe, LearnerServer, Schedule};
pub use protocol::{read_message, write_message, WireMessage, PROTOCOL_VERSION};
pub use registry::{ActorEntry, ActorRegistry, HEARTBEAT_PERIOD, STALE_AFTER};

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::trainer::{Learner, MetricsLog, OnlineReport, StopRule};

/// Networked online training: a learner on an ephemeral local port and
/// `actors` actor threads. Returns the learner's report, its final buffer
/// and one report per actor.
pub fn train_networked(
    learner: &mut Learner,
    buffer: ReplayBuffer,
    actors: u32,
    schedule: Schedule,
    pace: Option<Duration>,
    stop_rule: StopRule,
    metrics: &mut MetricsLog,
) -> Result<(OnlineReport, ReplayBuffer, Vec<ActorReport>)> {
    if actors == 0 {
        return Err(Error::InvalidArgument("networked training needs at least one actor".into()));
    }
    let server = LearnerServer::bind("127.0.0.1:0", learner, buffer)?;
    let addr = server.local_addr()?.to_string();
    let cfg = learner.cfg.clone();
    let handles: Vec<_> = (0..actors)
        .map(|actor_id| {
            let addr = addr.clone();
            let cfg = cfg.clone();
            std::thread::spawn(move || {
                let opts = ActorOptions {
                    actor_id,
                    lockstep: schedule == Schedule::Lockstep,
                    pace,
                    ..Default::default()
                };
                run_actor(&addr, &cfg, &cfg.env, &opts, None)
            })
        })
        .collect();
    let (report, buffer) = server.run(learner, schedule, stop_rule, metrics)?;
    let mut actor_reports = Vec::with_capacity(handles.len());
    for h in handles {
        actor_reports.push(h.join().map_err(|_| Error::Protocol("actor thread panicked".into()))??);
    }
    Ok((report, buffer, actor_reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub actors: u32,
    pub seed: u64,
    /// Environment steps and wall seconds when the task-averaged success
    /// first reached the target, if it did.
    pub steps_to_target: Option<u64>,
    pub wall_to_target: Option<f64>,
    pub env_steps: u64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub runs: Vec<ScalingRun>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl ScalingReport {
    pub fn counts(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.runs.iter().map(|r| r.actors).collect();
        c.dedup();
        c
    }

    /// Median wall time to target over runs that reached it; runs that
    /// did not count as their full duration.
    pub fn median_wall(&self, actors: u32) -> Option<f64> {
        median(
            self.runs
                .iter()
                .filter(|r| r.actors == actors)
                .map(|r| r.wall_to_target.unwrap_or(r.wall_s))
                .collect(),
        )
    }

    pub fn median_steps(&self, actors: u32) -> Option<f64> {
        median(
            self.runs
                .iter()
                .filter(|r| r.actors == actors)
                .map(|r| r.steps_to_target.unwrap_or(r.env_steps) as f64)
                .collect(),
        )
    }

    pub fn reached(&self, actors: u32) -> usize {
        self.runs
            .iter()
            .filter(|r| r.actors == actors && r.wall_to_target.is_some())
            .count()
    }

    /// Median wall time of `base` actors over that of `other` actors.
    pub fn speedup(&self, base: u32, other: u32) -> Option<f64> {
        Some(self.median_wall(base)? / self.median_wall(other)?)
    }

    pub fn to_table(&self) -> String {
        let counts = self.counts();
        let base = counts.first().copied();
        let mut out = format!(
            "{:>6} {:>6} {:>8} {:>14} {:>14} {:>8}\n",
            "actors", "runs", "reached", "median steps", "median wall s", "speedup"
        );
        for &c in &counts {
            let runs = self.runs.iter().filter(|r| r.actors == c).count();
            let speed = base.and_then(|b| self.speedup(b, c)).unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{:>6} {:>6} {:>8} {:>14.0} {:>14.1} {:>7.2}x\n",
                c,
                runs,
                self.reached(c),
                self.median_steps(c).unwrap_or(f64::NAN),
                self.median_wall(c).unwrap_or(f64::NAN),
                speed
            ));
        }
        out
    }
}

/// For each actor count and seed, trains from the given warmed-up learner
/// and buffer until the task-averaged evaluation success reaches the target
/// or the step budget runs out.
pub fn scaling_benchmark(
    learner: &Learner,
    buffer: &ReplayBuffer,
    actor_counts: &[u32],
    seeds: &[u64],
    pace: Duration,
    max_lag: u64,
) -> Result<ScalingReport> {
    if actor_counts.is_empty() || actor_counts.contains(&0) {
        return Err(Error::InvalidArgument("scaling benchmark needs actor counts of at least 1".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("scaling benchmark needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for &actors in actor_counts {
        for &seed in seeds {
            let mut l = learner.clone();
            l.cfg.seed = seed;
            let (rep, _, _) = train_networked(
                &mut l,
                buffer.clone(),
                actors,
                Schedule::Concurrent { max_lag },
                Some(pace),
                StopRule::MeanOverTasks,
                &mut MetricsLog::discard(),
            )?;
            runs.push(ScalingRun {
                actors,
                seed,
                steps_to_target: rep.reached_mean.as_ref().map(|p| p.env_steps),
                wall_to_target: rep.reached_mean.as_ref().map(|p| p.wall_s),
                env_steps: rep.env_steps,
                wall_s: rep.wall_s,
            });
        }
    }
    Ok(ScalingReport { runs })
}
