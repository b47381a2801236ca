//! Success-rate evaluation, optionally with refinement commands issued by a
//! scripted stand-in for the operator.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::actors::DualActor;
use crate::domain::{Action, Observation, RefinementCommand, TaskSpec};
use crate::env::{chain_succeeded, grasp_point, rollout, run_long_horizon, EnvConfig, Policy, Scene};
use crate::error::Result;
use crate::numerics::SimRng;
use crate::talk_tweak::axis_command;

use super::PolicySnapshot;

/// Issues a command when the last `window` steps made less than
/// `min_progress` towards the current target while more than `min_error`
/// remains. The target is the grasp point (gripper error) before the object
/// is attached and the goal position (object error) afterwards.
#[derive(Debug, Clone)]
pub struct CommandOracle {
    pub window: usize,
    pub min_progress: f64,
    pub min_error: f64,
    pub sigma: f64,
    /// Steps a command stays active once issued.
    pub hold: usize,
    task: Option<TaskSpec>,
    history: VecDeque<f64>,
    active: Option<(RefinementCommand, usize)>,
    pub issued: usize,
}

impl Default for CommandOracle {
    fn default() -> Self {
        Self {
            window: 5,
            min_progress: 0.001,
            min_error: 0.005,
            sigma: 0.001,
            hold: 5,
            task: None,
            history: VecDeque::new(),
            active: None,
            issued: 0,
        }
    }
}

impl CommandOracle {
    pub fn begin_episode(&mut self, task: &TaskSpec) {
        self.task = Some(task.clone());
        self.history.clear();
        self.active = None;
    }

    /// Positional error vector towards the current phase target.
    pub fn target_error(obs: &Observation, task: &TaskSpec) -> [f64; 3] {
        if obs.attached {
            let (g, o) = (obs.goal_pos(), obs.object_pos());
            [g[0] - o[0], g[1] - o[1], g[2] - o[2]]
        } else {
            let g = grasp_point(obs, task);
            [g[0] - obs.ee_pos[0], g[1] - obs.ee_pos[1], g[2] - obs.ee_pos[2]]
        }
    }

    pub fn command(&mut self, obs: &Observation) -> Option<RefinementCommand> {
        let task = self.task.as_ref()?;
        let err = Self::target_error(obs, task);
        let dist = err.iter().map(|e| e * e).sum::<f64>().sqrt();
        if let Some((cmd, left)) = self.active {
            if left > 1 {
                self.active = Some((cmd, left - 1));
            } else {
                self.active = None;
                self.history.clear();
            }
            return Some(cmd);
        }
        self.history.push_back(dist);
        if self.history.len() > self.window + 1 {
            self.history.pop_front();
        }
        if self.history.len() <= self.window || dist <= self.min_error {
            return None;
        }
        let progress = self.history.front().copied().unwrap_or(dist) - dist;
        if progress >= self.min_progress {
            return None;
        }
        let cmd = RefinementCommand {
            axes: err.map(|e| axis_command(e, self.sigma)),
            is_null: false,
        };
        if cmd.is_all_zero() {
            return None;
        }
        self.issued += 1;
        self.active = (self.hold > 1).then_some((cmd, self.hold - 1));
        if self.active.is_none() {
            self.history.clear();
        }
        Some(cmd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommandSource {
    Oracle,
    /// Commands arrive from the operator interface; evaluation without a
    /// connected operator behaves like primary mode.
    Human,
}

/// A snapshot driven as an environment policy.
pub struct SnapshotPolicy {
    pub actor: DualActor,
    pub rng: SimRng,
    pub commands: Option<CommandOracle>,
}

impl SnapshotPolicy {
    pub fn primary(actor: DualActor, seed: u64) -> Self {
        Self {
            actor,
            rng: SimRng::seed_from(seed),
            commands: None,
        }
    }

    pub fn refined(actor: DualActor, seed: u64, oracle: CommandOracle) -> Self {
        Self {
            actor,
            rng: SimRng::seed_from(seed),
            commands: Some(oracle),
        }
    }
}

impl Policy for SnapshotPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        let cmd = self.commands.as_mut().and_then(|c| c.command(obs));
        self.actor.act(obs, cmd.as_ref(), &mut self.rng)
    }

    fn begin_episode(&mut self, task: &TaskSpec) {
        if let Some(c) = self.commands.as_mut() {
            c.begin_episode(task);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub name: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub use_refinement: bool,
    pub tasks: Vec<TaskEval>,
    pub commands_issued: usize,
}

impl EvalReport {
    pub fn mean_success(&self) -> f64 {
        self.tasks.iter().map(|t| t.success_rate).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn min_success(&self) -> f64 {
        self.tasks.iter().map(|t| t.success_rate).fold(f64::INFINITY, f64::min)
    }

    pub fn mean_length(&self) -> f64 {
        self.tasks.iter().map(|t| t.mean_length).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn success_rates(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.success_rate).collect()
    }

    /// Table with one row per task plus the average.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>8} {:>10}\n",
            if self.use_refinement { "task (refined)" } else { "task (primary)" },
            "success",
            "mean len"
        );
        for t in &self.tasks {
            out.push_str(&format!(
                "{:<28} {:>7.1}% {:>10.1}\n",
                t.name,
                100.0 * t.success_rate,
                t.mean_length
            ));
        }
        out.push_str(&format!(
            "{:<28} {:>7.1}% {:>10.1}\n",
            "average",
            100.0 * self.mean_success(),
            self.mean_length()
        ));
        out
    }
}

/// Runs `n_trials` episodes per task with scene seeds derived from `seed`.
pub fn evaluate_policy(env: &EnvConfig, policy: &mut dyn Policy, n_trials: usize, seed: u64) -> Result<Vec<TaskEval>> {
    let mut out = Vec::with_capacity(env.n_tasks());
    for task in 0..env.n_tasks() {
        let mut seeds = SimRng::seed_from(seed ^ (task as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let mut successes = 0;
        let mut total_len = 0u64;
        for _ in 0..n_trials {
            let mut scene = Scene::reset(env, task, seeds.next_u64())?;
            let ep = rollout(&mut scene, policy, None)?;
            successes += ep.result.success as usize;
            total_len += ep.result.length as u64;
        }
        out.push(TaskEval {
            task,
            name: env.task(task)?.name.clone(),
            trials: n_trials,
            successes,
            success_rate: successes as f64 / n_trials.max(1) as f64,
            mean_length: total_len as f64 / n_trials.max(1) as f64,
        });
    }
    Ok(out)
}

/// Evaluates a snapshot in primary mode or with refinement commands. Both
/// modes consume the same noise stream, so they differ only where a
/// command is active.
pub fn evaluate(
    snapshot: &PolicySnapshot,
    env: &EnvConfig,
    n_trials: usize,
    use_refinement: bool,
    command_source: CommandSource,
    seed: u64,
) -> Result<EvalReport> {
    let policy_seed = seed ^ 0x5EED_0F_E7A1;
    let mut policy = if use_refinement && command_source == CommandSource::Oracle {
        SnapshotPolicy::refined(snapshot.actor.clone(), policy_seed, CommandOracle::default())
    } else {
        SnapshotPolicy::primary(snapshot.actor.clone(), policy_seed)
    };
    let tasks = evaluate_policy(env, &mut policy, n_trials, seed)?;
    Ok(EvalReport {
        use_refinement,
        tasks,
        commands_issued: policy.commands.map_or(0, |c| c.issued),
    })
}

/// Chain success per chain length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongHorizonReport {
    pub seeds: Vec<u64>,
    /// `(n_bolts, chains completed)` per length.
    pub completed: Vec<(usize, usize)>,
}

impl LongHorizonReport {
    pub fn rate(&self, n_bolts: usize) -> Option<f64> {
        self.completed
            .iter()
            .find(|(n, _)| *n == n_bolts)
            .map(|(_, k)| *k as f64 / self.seeds.len().max(1) as f64)
    }

    pub fn rates(&self) -> Vec<f64> {
        self.completed.iter().filter_map(|(n, _)| self.rate(*n)).collect()
    }

    pub fn non_increasing(&self) -> bool {
        self.rates().windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>7} {:>8} {:>9}\n", "bolts", "chains", "success");
        for &(n, k) in &self.completed {
            out.push_str(&format!(
                "{:>7} {:>8} {:>8.1}%\n",
                n,
                self.seeds.len(),
                100.0 * k as f64 / self.seeds.len().max(1) as f64
            ));
        }
        out
    }
}

/// Runs one chain per seed for every length `1..=max_bolts` in primary
/// mode. Scene and policy noise derive from the seed alone, so the chain
/// of `n` bolts replays the chain of `n - 1` before adding one more.
pub fn long_horizon(snapshot: &PolicySnapshot, env: &EnvConfig, max_bolts: usize, seeds: &[u64]) -> Result<LongHorizonReport> {
    let mut completed = Vec::with_capacity(max_bolts);
    for n in 1..=max_bolts {
        let mut k = 0;
        for &seed in seeds {
            let mut policy = SnapshotPolicy::primary(snapshot.actor.clone(), seed ^ 0x10_4E_C4A1);
            let results = run_long_horizon(env, &mut policy, n, seed)?;
            k += chain_succeeded(&results, n, env.n_tasks()) as usize;
        }
        completed.push((n, k));
    }
    Ok(LongHorizonReport {
        seeds: seeds.to_vec(),
        completed,
    })
}
