//! Deterministic kinematic simulator for the three manipulation tasks.
//!
//! The end-effector integrates clamped delta poses inside a box workspace.
//! Closing the gripper within `grasp_tolerance` of the object's grasp point
//! attaches the object rigidly (constant pose offset); opening detaches it.
//! Reward is sparse: 1 on the step the object pose comes within the task's
//! tolerance of the goal, which also ends the episode; otherwise the episode
//! ends with reward 0 at the step limit.

use serde::{Deserialize, Serialize};

use crate::domain::{
    default_tasks, wrap_angle, Action, GripState, Observation, TaskId, TaskSpec, Transition,
};
use crate::error::{Error, Result};
use crate::numerics::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub tasks: Vec<TaskSpec>,
    /// Half-width of the cubic workspace (m).
    pub workspace_half: f64,
    pub home_pos: [f64; 3],
    pub grasp_tolerance: f64,
    pub episode_limit: u32,
    pub expert_gain: f64,
    /// Std (m) of zero-mean noise added to the expert's translation.
    pub expert_noise: f64,
    /// Translation disagreement (m) that counts towards an intervention streak.
    pub intervention_threshold: f64,
    pub intervention_streak: u32,
    pub intervention_min_len: u32,
    /// Per-actor offset added to every goal draw; emulates installation
    /// differences between robots.
    pub goal_perturbation: [f64; 3],
    /// Seconds per control step, for wall-clock reporting only.
    pub control_period_s: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            workspace_half: 0.15,
            home_pos: [0.0, 0.0, 0.10],
            grasp_tolerance: 0.005,
            episode_limit: 50,
            expert_gain: 0.5,
            expert_noise: 0.001,
            intervention_threshold: 0.0025,
            intervention_streak: 3,
            intervention_min_len: 5,
            goal_perturbation: [0.0; 3],
            control_period_s: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: TaskId) -> Result<&TaskSpec> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::Env(format!("unknown task id {id} ({} tasks configured)", self.tasks.len())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::Config(format!("task {i} carries id {}", t.id)));
            }
            if !(t.success_tolerance_pos > 0.0 && t.success_tolerance_rot > 0.0) {
                return Err(Error::Config(format!("task {i} tolerances must be positive")));
            }
        }
        if !(self.workspace_half > 0.0 && self.grasp_tolerance > 0.0 && self.expert_gain > 0.0) {
            return Err(Error::Config("workspace, grasp tolerance and expert gain must be positive".into()));
        }
        if self.episode_limit == 0 || self.intervention_min_len == 0 || self.intervention_streak == 0 {
            return Err(Error::Config("episode limit and intervention lengths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub length: u32,
    pub interventions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Live simulator state for one episode.
#[derive(Debug, Clone)]
pub struct Scene {
    cfg: EnvConfig,
    task: TaskSpec,
    obs: Observation,
    /// `object_pose - ee_pose` while attached.
    attach_offset: [f64; 6],
    done: bool,
}

fn clamp3(v: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [v[0].clamp(lo[0], hi[0]), v[1].clamp(lo[1], hi[1]), v[2].clamp(lo[2], hi[2])]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl Scene {
    /// Fresh episode: end-effector at home, object and goal offset by
    /// independent uniform x–y draws in `[-xy_range, xy_range]`.
    pub fn reset(cfg: &EnvConfig, task_id: TaskId, seed: u64) -> Result<Self> {
        let task = cfg.task(task_id)?.clone();
        let mut rng = SimRng::seed_from(seed);
        let r = task.xy_range;
        let mut object = task.object_template;
        object[0] += rng.uniform(-r, r);
        object[1] += rng.uniform(-r, r);
        let goal = Self::draw_goal(cfg, &task, &mut rng);
        Ok(Self::from_poses(cfg, task, object, goal))
    }

    /// Start the next subtask of a chain: the object keeps its pose, a new
    /// goal is drawn and the arm re-homes with the gripper open.
    pub fn reset_chained(cfg: &EnvConfig, task_id: TaskId, seed: u64, object_pose: [f64; 6]) -> Result<Self> {
        let task = cfg.task(task_id)?.clone();
        let mut rng = SimRng::seed_from(seed);
        // Keep the draw sequence aligned with `reset`.
        rng.uniform01();
        rng.uniform01();
        let goal = Self::draw_goal(cfg, &task, &mut rng);
        Ok(Self::from_poses(cfg, task, object_pose, goal))
    }

    fn draw_goal(cfg: &EnvConfig, task: &TaskSpec, rng: &mut SimRng) -> [f64; 6] {
        let r = task.xy_range;
        let mut goal = task.goal_template;
        goal[0] += rng.uniform(-r, r) + cfg.goal_perturbation[0];
        goal[1] += rng.uniform(-r, r) + cfg.goal_perturbation[1];
        goal[2] += cfg.goal_perturbation[2];
        goal
    }

    /// Scene with explicit poses; used by `reset` and by test fixtures.
    pub fn from_poses(cfg: &EnvConfig, task: TaskSpec, object_pose: [f64; 6], goal_pose: [f64; 6]) -> Self {
        let obs = Observation {
            ee_pos: cfg.home_pos,
            ee_rpy: [0.0; 3],
            grip_state: GripState::Open,
            object_pose,
            goal_pose,
            attached: false,
            step_index: 0,
            task_id: task.id,
        };
        Self {
            cfg: cfg.clone(),
            task,
            obs,
            attach_offset: [0.0; 6],
            done: false,
        }
    }

    pub fn observation(&self) -> Observation {
        self.obs
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn grasp_point(&self) -> [f64; 3] {
        grasp_point(&self.obs, &self.task)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        if !action.is_finite() {
            return Err(Error::Env(format!("non-finite action {action:?}")));
        }
        let a = action.clamped();
        let b = self.cfg.workspace_half;
        let o = &mut self.obs;

        let mut lo = [-b; 3];
        let mut hi = [b; 3];
        if o.attached {
            // Keep the carried object inside the box as well.
            for d in 0..3 {
                lo[d] = lo[d].max(-b - self.attach_offset[d]);
                hi[d] = hi[d].min(b - self.attach_offset[d]);
            }
        }
        let moved = [o.ee_pos[0] + a.dpos[0], o.ee_pos[1] + a.dpos[1], o.ee_pos[2] + a.dpos[2]];
        o.ee_pos = clamp3(moved, lo, hi);
        for d in 0..3 {
            o.ee_rpy[d] = wrap_angle(o.ee_rpy[d] + a.drot[d]);
        }

        let closed = a.gripper_closed();
        o.grip_state = if closed { GripState::Closed } else { GripState::Open };
        if !closed {
            o.attached = false;
        } else if !o.attached && dist(o.ee_pos, grasp_point(o, &self.task)) <= self.cfg.grasp_tolerance {
            o.attached = true;
            for d in 0..3 {
                self.attach_offset[d] = o.object_pose[d] - o.ee_pos[d];
                self.attach_offset[3 + d] = wrap_angle(o.object_pose[3 + d] - o.ee_rpy[d]);
            }
        }
        if o.attached {
            for d in 0..3 {
                o.object_pose[d] = o.ee_pos[d] + self.attach_offset[d];
                o.object_pose[3 + d] = wrap_angle(o.ee_rpy[d] + self.attach_offset[3 + d]);
            }
        }

        o.step_index += 1;
        let (reward, done) = if task_success(o, &self.task) {
            (1.0, true)
        } else {
            (0.0, o.step_index >= self.cfg.episode_limit)
        };
        self.done = done;
        Ok(StepOutcome {
            obs: *o,
            reward,
            done,
        })
    }
}

pub fn grasp_point(obs: &Observation, task: &TaskSpec) -> [f64; 3] {
    let p = obs.object_pos();
    [p[0] + task.grasp_offset[0], p[1] + task.grasp_offset[1], p[2] + task.grasp_offset[2]]
}

/// Object pose within the task tolerance of the goal pose.
pub fn task_success(obs: &Observation, task: &TaskSpec) -> bool {
    let pos_err = dist(obs.object_pos(), obs.goal_pos());
    let rot_err = (0..3)
        .map(|d| wrap_angle(obs.goal_pose[3 + d] - obs.object_pose[3 + d]).abs())
        .fold(0.0, f64::max);
    pos_err <= task.success_tolerance_pos && rot_err <= task.success_tolerance_rot
}

/// Proportional controller towards the current phase target: the grasp
/// point while the object is free (closing once within grasp tolerance),
/// then the goal pose for the carried object, releasing once aligned.
pub fn scripted_expert(obs: &Observation, task: &TaskSpec, cfg: &EnvConfig, noise: Option<&mut SimRng>) -> Action {
    let gain = cfg.expert_gain;
    let mut action = Action::ZERO;
    if !obs.attached {
        let target = grasp_point(obs, task);
        let err = [target[0] - obs.ee_pos[0], target[1] - obs.ee_pos[1], target[2] - obs.ee_pos[2]];
        for d in 0..3 {
            action.dpos[d] = gain * err[d];
        }
        let close = (err[0].powi(2) + err[1].powi(2) + err[2].powi(2)).sqrt() <= cfg.grasp_tolerance;
        action.grip = if close { 1.0 } else { 0.0 };
        if task_success(obs, task) {
            action = Action::ZERO;
        }
    } else {
        for d in 0..3 {
            action.dpos[d] = gain * (obs.goal_pose[d] - obs.object_pose[d]);
            action.drot[d] = gain * wrap_angle(obs.goal_pose[3 + d] - obs.object_pose[3 + d]);
        }
        action.grip = if task_success(obs, task) { 0.0 } else { 1.0 };
    }
    if let Some(rng) = noise {
        if cfg.expert_noise > 0.0 {
            for d in 0..3 {
                action.dpos[d] += cfg.expert_noise * rng.standard_normal();
            }
        }
    }
    action.clamped()
}

/// Automated stand-in for a human supervisor. A burst starts once the
/// policy's translation disagrees with the expert's by more than the
/// threshold for `intervention_streak` consecutive steps, and lasts at least
/// `intervention_min_len` steps (then until the disagreement clears).
#[derive(Debug, Clone)]
pub struct InterventionOracle {
    threshold: f64,
    streak_needed: u32,
    min_len: u32,
    streak: u32,
    burst: Option<u32>,
}

impl InterventionOracle {
    pub fn new(cfg: &EnvConfig) -> Self {
        Self::with_params(cfg.intervention_threshold, cfg.intervention_streak, cfg.intervention_min_len)
    }

    pub fn with_params(threshold: f64, streak_needed: u32, min_len: u32) -> Self {
        Self {
            threshold,
            streak_needed,
            min_len,
            streak: 0,
            burst: None,
        }
    }

    pub fn reset(&mut self) {
        self.streak = 0;
        self.burst = None;
    }

    pub fn in_burst(&self) -> bool {
        self.burst.is_some()
    }

    pub fn decide(&mut self, policy: &Action, expert: &Action) -> Option<Action> {
        let gap = dist(policy.dpos, expert.dpos);
        let disagree = gap > self.threshold;
        match self.burst {
            Some(n) if n >= self.min_len && !disagree => {
                self.burst = None;
                self.streak = 0;
                None
            }
            Some(n) => {
                self.burst = Some(n + 1);
                Some(*expert)
            }
            None => {
                self.streak = if disagree { self.streak + 1 } else { 0 };
                if self.streak >= self.streak_needed {
                    self.streak = 0;
                    self.burst = Some(1);
                    Some(*expert)
                } else {
                    None
                }
            }
        }
    }
}

/// Anything that maps observations to actions.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<Action>;

    /// Called at the start of every episode.
    fn begin_episode(&mut self, _task: &TaskSpec) {}
}

/// The scripted expert wrapped as a policy.
pub struct ExpertPolicy {
    cfg: EnvConfig,
    rng: Option<SimRng>,
}

impl ExpertPolicy {
    pub fn noiseless(cfg: &EnvConfig) -> Self {
        Self { cfg: cfg.clone(), rng: None }
    }

    pub fn noisy(cfg: &EnvConfig, seed: u64) -> Self {
        Self {
            cfg: cfg.clone(),
            rng: Some(SimRng::seed_from(seed)),
        }
    }
}

impl Policy for ExpertPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        let task = self.cfg.task(obs.task_id)?;
        Ok(scripted_expert(obs, task, &self.cfg, self.rng.as_mut()))
    }
}

/// A recorded episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub result: EpisodeResult,
}

/// Decides, step by step, whether a supervisor overrides the policy.
pub trait Supervisor {
    /// Identifies the episode about to start and the snapshot driving it.
    fn episode_context(&mut self, _episode_id: u64, _snapshot_version: u64) {}

    fn begin_episode(&mut self, _scene: &Scene) {}

    /// Checked before every step; `true` truncates the episode there.
    fn abort_episode(&mut self) -> bool {
        false
    }

    /// A returned action replaces `proposed` and flags the step intervened.
    fn supervise(&mut self, scene: &Scene, obs: &Observation, proposed: &Action) -> Result<Option<Action>>;

    fn after_step(&mut self, _scene: &Scene, _transition: &Transition) {}
}

/// The scripted intervention oracle with its own noise stream.
pub struct OracleSupervisor<'a> {
    pub oracle: &'a mut InterventionOracle,
    pub rng: &'a mut SimRng,
}

impl Supervisor for OracleSupervisor<'_> {
    fn begin_episode(&mut self, _scene: &Scene) {
        self.oracle.reset();
    }

    fn supervise(&mut self, scene: &Scene, obs: &Observation, proposed: &Action) -> Result<Option<Action>> {
        let expert = scripted_expert(obs, scene.task(), scene.config(), Some(&mut *self.rng));
        Ok(self.oracle.decide(proposed, &expert))
    }
}

/// Roll a policy out to termination. With an oracle, expert actions replace
/// the policy's during intervention bursts and are flagged `intervened`.
pub fn rollout(
    scene: &mut Scene,
    policy: &mut dyn Policy,
    oracle: Option<(&mut InterventionOracle, &mut SimRng)>,
) -> Result<Episode> {
    match oracle {
        Some((oracle, rng)) => rollout_supervised(scene, policy, Some(&mut OracleSupervisor { oracle, rng })),
        None => rollout_supervised(scene, policy, None),
    }
}

pub fn rollout_supervised(
    scene: &mut Scene,
    policy: &mut dyn Policy,
    mut supervisor: Option<&mut dyn Supervisor>,
) -> Result<Episode> {
    policy.begin_episode(&scene.task().clone());
    if let Some(s) = supervisor.as_mut() {
        s.begin_episode(scene);
    }
    let mut transitions = Vec::new();
    let mut interventions = 0;
    let mut success = false;
    while !scene.is_done() {
        if supervisor.as_mut().is_some_and(|s| s.abort_episode()) {
            break;
        }
        let obs = scene.observation();
        let proposed = policy.act(&obs)?;
        let mut executed = proposed;
        let mut intervened = false;
        if let Some(s) = supervisor.as_mut() {
            if let Some(a) = s.supervise(scene, &obs, &proposed)? {
                executed = a;
                intervened = true;
                interventions += 1;
            }
        }
        let executed = executed.clamped();
        let out = scene.step(&executed)?;
        success |= out.reward > 0.0;
        let t = Transition {
            obs,
            action: executed,
            reward: out.reward,
            next_obs: out.obs,
            done: out.done,
            intervened,
            task_id: obs.task_id,
        };
        if let Some(s) = supervisor.as_mut() {
            s.after_step(scene, &t);
        }
        transitions.push(t);
    }
    Ok(Episode {
        result: EpisodeResult {
            success,
            length: transitions.len() as u32,
            interventions,
        },
        transitions,
    })
}

/// Place → pick → assemble per bolt, carrying the object pose between
/// subtasks and stopping at the first failure.
pub fn run_long_horizon(cfg: &EnvConfig, policy: &mut dyn Policy, n_bolts: usize, seed: u64) -> Result<Vec<EpisodeResult>> {
    if n_bolts == 0 {
        return Err(Error::InvalidArgument("n_bolts must be at least 1".into()));
    }
    let mut rng = SimRng::seed_from(seed);
    let mut results = Vec::with_capacity(n_bolts * cfg.n_tasks());
    for _bolt in 0..n_bolts {
        let mut carried: Option<[f64; 6]> = None;
        for task in 0..cfg.n_tasks() {
            let s = rng.next_u64();
            let mut scene = match carried {
                None => Scene::reset(cfg, task, s)?,
                Some(pose) => Scene::reset_chained(cfg, task, s, pose)?,
            };
            let ep = rollout(&mut scene, policy, None)?;
            results.push(ep.result);
            if !ep.result.success {
                return Ok(results);
            }
            carried = Some(scene.observation().object_pose);
        }
    }
    Ok(results)
}

pub fn chain_succeeded(results: &[EpisodeResult], n_bolts: usize, n_tasks: usize) -> bool {
    results.len() == n_bolts * n_tasks && results.iter().all(|r| r.success)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{MAX_DPOS, MAX_DROT};

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn reset_is_deterministic() {
        let c = cfg();
        let a = Scene::reset(&c, 1, 99).unwrap().observation();
        let b = Scene::reset(&c, 1, 99).unwrap().observation();
        assert_eq!(a, b);
        assert_eq!(a.step_index, 0);
    }

    #[test]
    fn reset_offsets_cover_the_range_in_xy_only() {
        let c = cfg();
        let t = &c.tasks[0];
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for seed in 0..10_000 {
            let o = Scene::reset(&c, 0, seed).unwrap().observation();
            let offs = [
                o.object_pose[0] - t.object_template[0],
                o.object_pose[1] - t.object_template[1],
                o.goal_pose[0] - t.goal_template[0],
                o.goal_pose[1] - t.goal_template[1],
            ];
            assert_eq!(o.object_pose[2], t.object_template[2]);
            assert_eq!(o.goal_pose[2], t.goal_template[2]);
            for i in 0..4 {
                lo[i] = lo[i].min(offs[i]);
                hi[i] = hi[i].max(offs[i]);
            }
        }
        for i in 0..4 {
            assert!((-0.05..=-0.045).contains(&lo[i]), "min {i} = {}", lo[i]);
            assert!((0.045..=0.05).contains(&hi[i]), "max {i} = {}", hi[i]);
        }
    }

    #[test]
    fn zero_action_times_out_without_reward() {
        let c = cfg();
        let mut s = Scene::reset(&c, 2, 5).unwrap();
        for k in 1..=50 {
            let out = s.step(&Action::ZERO).unwrap();
            assert_eq!(out.reward, 0.0);
            assert_eq!(out.done, k == 50);
        }
        assert!(s.step(&Action::ZERO).is_err());
    }

    #[test]
    fn object_at_goal_succeeds_on_first_step() {
        let c = cfg();
        let task = c.tasks[1].clone();
        let pose = [0.01, 0.02, 0.0, 0.0, 0.0, 0.0];
        let mut s = Scene::from_poses(&c, task, pose, pose);
        let out = s.step(&Action::ZERO).unwrap();
        assert_eq!((out.reward, out.done), (1.0, true));
    }

    #[test]
    fn expert_controller_clamps() {
        let c = cfg();
        let task = c.tasks[1].clone();
        let s = Scene::from_poses(&c, task.clone(), [0.1, 0.0, 0.08, 0.0, 0.0, 0.0], [0.0; 6]);
        let mut obs = s.observation();
        // Grasp point sits 0.1 m along +x from the end-effector.
        obs.ee_pos = [0.0, 0.0, 0.10];
        let a = scripted_expert(&obs, &task, &c, None);
        assert_eq!(a.dpos, [0.01, 0.0, 0.0]);
        assert_eq!(a.grip, 0.0);
    }

    #[test]
    fn expert_at_goal_is_still_and_releases() {
        let c = cfg();
        let task = c.tasks[2].clone();
        let pose = [0.02, 0.01, 0.0, 0.0, 0.0, 0.0];
        let s = Scene::from_poses(&c, task.clone(), pose, pose);
        let mut obs = s.observation();
        obs.attached = true;
        obs.grip_state = GripState::Closed;
        let a = scripted_expert(&obs, &task, &c, None);
        assert_eq!(a.dpos, [0.0; 3]);
        assert_eq!(a.drot, [0.0; 3]);
        assert!(!a.gripper_closed());
    }

    #[test]
    fn noiseless_expert_solves_every_task() {
        let c = cfg();
        for task in 0..3 {
            for seed in 0..20 {
                let mut scene = Scene::reset(&c, task, seed).unwrap();
                let ep = rollout(&mut scene, &mut ExpertPolicy::noiseless(&c), None).unwrap();
                assert!(ep.result.success, "task {task} seed {seed}");
                assert!(ep.result.length <= 50);
                let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
                assert_eq!(rewards.iter().filter(|&&r| r == 1.0).count(), 1);
                assert_eq!(*rewards.last().unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn attach_offset_is_constant_and_box_respected() {
        let c = cfg();
        let mut rng = SimRng::seed_from(4);
        for seed in 0..20 {
            let mut scene = Scene::reset(&c, seed as usize % 3, seed).unwrap();
            let mut offset: Option<[f64; 3]> = None;
            while !scene.is_done() {
                let obs = scene.observation();
                let mut a = scripted_expert(&obs, scene.task(), &c, None);
                if obs.attached {
                    for d in 0..3 {
                        a.dpos[d] = rng.uniform(-0.02, 0.02);
                    }
                    a.grip = 1.0;
                }
                let o = scene.step(&a).unwrap().obs;
                for d in 0..3 {
                    assert!(o.ee_pos[d].abs() <= c.workspace_half + 1e-12);
                    assert!(o.object_pose[d].abs() <= c.workspace_half + 1e-12);
                }
                if o.attached {
                    let off = [
                        o.object_pose[0] - o.ee_pos[0],
                        o.object_pose[1] - o.ee_pos[1],
                        o.object_pose[2] - o.ee_pos[2],
                    ];
                    if let Some(prev) = offset {
                        for d in 0..3 {
                            assert!((prev[d] - off[d]).abs() < 1e-12);
                        }
                    }
                    offset = Some(off);
                }
            }
        }
    }

    #[test]
    fn oracle_never_fires_when_policy_matches() {
        let c = cfg();
        let mut o = InterventionOracle::new(&c);
        let a = Action {
            dpos: [0.01, 0.0, -0.01],
            ..Action::ZERO
        };
        for _ in 0..100 {
            assert!(o.decide(&a, &a).is_none());
        }
        let mut never = InterventionOracle::with_params(f64::INFINITY, 3, 5);
        let b = Action { dpos: [-0.01, 0.0, 0.01], ..Action::ZERO };
        for _ in 0..100 {
            assert!(never.decide(&a, &b).is_none());
        }
    }

    #[test]
    fn oracle_streak_and_burst_lengths() {
        let c = cfg();
        let mut o = InterventionOracle::new(&c);
        let expert = Action {
            dpos: [0.01, 0.0, 0.0],
            ..Action::ZERO
        };
        let opposite = Action {
            dpos: [-0.01, 0.0, 0.0],
            ..Action::ZERO
        };
        let fired: Vec<bool> = (0..10).map(|_| o.decide(&opposite, &expert).is_some()).collect();
        assert_eq!(&fired[..2], &[false, false]);
        assert!(fired[2..].iter().all(|&f| f));
        // Once the policy agrees again the burst ends, but only after 5 steps.
        let mut o = InterventionOracle::new(&c);
        let mut seq = vec![];
        for k in 0..12 {
            let p = if k < 3 { opposite } else { expert };
            seq.push(o.decide(&p, &expert).is_some());
        }
        assert_eq!(seq.iter().filter(|&&f| f).count(), 5);
        assert_eq!(&seq[..3], &[false, false, true]);
    }

    #[test]
    fn expert_completes_long_horizon_chains() {
        let c = cfg();
        let results = run_long_horizon(&c, &mut ExpertPolicy::noiseless(&c), 4, 17).unwrap();
        assert_eq!(results.len(), 12);
        assert!(chain_succeeded(&results, 4, 3));
    }

    struct Frozen;
    impl Policy for Frozen {
        fn act(&mut self, _obs: &Observation) -> Result<Action> {
            Ok(Action::ZERO)
        }
    }

    #[test]
    fn failing_first_subtask_aborts_chain() {
        let c = cfg();
        let results = run_long_horizon(&c, &mut Frozen, 3, 1).unwrap();
        assert_eq!(results.len(), 1);
        assert!(!results[0].success);
        assert!(run_long_horizon(&c, &mut Frozen, 0, 1).is_err());
    }

    #[test]
    fn identical_actions_give_identical_trajectories() {
        let c = cfg();
        let mut rng = SimRng::seed_from(8);
        let actions: Vec<Action> = (0..50)
            .map(|_| Action {
                dpos: [rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)],
                drot: [rng.uniform(-0.1, 0.1), 0.0, 0.0],
                grip: rng.uniform01(),
            })
            .collect();
        let run = || {
            let mut s = Scene::reset(&c, 0, 77).unwrap();
            let mut out = vec![];
            for a in &actions {
                if s.is_done() {
                    break;
                }
                out.push(s.step(a).unwrap().obs);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clamped_action_bounds() {
        let a = Action {
            dpos: [1.0, -1.0, 0.005],
            drot: [0.2, -0.2, 0.0],
            grip: 3.0,
        }
        .clamped();
        assert_eq!(a.dpos, [MAX_DPOS, -MAX_DPOS, 0.005]);
        assert_eq!(a.drot, [MAX_DROT, -MAX_DROT, 0.0]);
        assert_eq!(a.grip, 1.0);
    }
}
