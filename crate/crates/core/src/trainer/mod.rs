//! Offline warm-up, online interaction with concurrent learning, and
//! evaluation.

mod checkpoint;
mod eval;
mod learner;
mod metrics;
mod online;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
pub use eval::{
    evaluate, evaluate_policy, long_horizon, CommandOracle, CommandSource, EvalReport, LongHorizonReport, SnapshotPolicy,
    TaskEval,
};
pub use learner::{Learner, PolicySnapshot, StepLog};
pub use metrics::{MetricsLog, MetricsRecord};
pub use online::{
    collect_demos, episode_id, online_phase, run_interaction_episode, run_supervised_episode, serial_learner_turn, warmup_phase, EpisodeBatch,
    EvalPoint, LearningContext, OnlineMode, OnlineReport, SharedState, SnapshotCell, StopRule,
};

use serde::{Deserialize, Serialize};

use crate::actors::ActorConfig;
use crate::critics::{CalQlConfig, TaskWeightConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::talk_tweak::TalkTweakConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub actor: ActorConfig,
    pub critic_hidden: usize,
    /// `(λ1, λ2)` during warm-up.
    pub lambda_warmup: (f64, f64),
    /// `(λ1, λ2)` during online interaction.
    pub lambda_online: (f64, f64),
    /// `(η1, η2, η3)` for the refinement actor.
    pub eta: (f64, f64, f64),
    pub gamma: f64,
    pub tau: f64,
    /// Clamp bootstrap targets to `[0, 1]`, the value range implied by
    /// sparse terminal rewards in `{0, 1}`.
    pub clip_q_targets: bool,
    pub batch_size: usize,
    pub refine_batch_size: usize,
    pub demos_per_task: usize,
    pub online_gate: usize,
    pub warmup_steps: usize,
    /// Learner updates per environment step.
    pub updates_per_step: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub refiner_lr: f64,
    pub calql: CalQlConfig,
    pub task_weights: TaskWeightConfig,
    pub talk: TalkTweakConfig,
    pub seed: u64,
    pub max_env_steps: usize,
    /// Environment steps between evaluations during online training.
    pub eval_every: usize,
    pub eval_trials: usize,
    pub target_success: f64,
    /// Learner updates between snapshot publications.
    pub snapshot_period: usize,
    pub disable_dual_actor: bool,
    pub disable_epsilon_weighting: bool,
    pub disable_talk_annotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            actor: ActorConfig::default(),
            critic_hidden: 64,
            lambda_warmup: (1.0, 0.1),
            lambda_online: (0.5, 0.5),
            eta: (1.0, 0.1, 0.1),
            gamma: 0.97,
            tau: 0.005,
            clip_q_targets: true,
            batch_size: 96,
            refine_batch_size: 32,
            demos_per_task: 20,
            online_gate: 100,
            warmup_steps: 5000,
            updates_per_step: 1.0,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            refiner_lr: 3e-4,
            calql: CalQlConfig::default(),
            task_weights: TaskWeightConfig::default(),
            talk: TalkTweakConfig::default(),
            seed: 0,
            max_env_steps: 60_000,
            eval_every: 2_000,
            eval_trials: 25,
            target_success: 0.9,
            snapshot_period: 50,
            disable_dual_actor: false,
            disable_epsilon_weighting: false,
            disable_talk_annotation: false,
        }
    }
}

impl TrainConfig {
    pub fn n_tasks(&self) -> usize {
        self.env.n_tasks()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let n = self.n_tasks();
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.batch_size % (2 * n) != 0 {
            return bad(format!("batch_size {} must be a positive multiple of {}", self.batch_size, 2 * n));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} must lie in (0, 1]", self.tau));
        }
        if !(self.actor.noise_scale > 0.0) {
            return bad("noise_scale must be positive".into());
        }
        let (l1, l2) = self.lambda_warmup;
        let (o1, o2) = self.lambda_online;
        let (e1, e2, e3) = self.eta;
        if [l1, l2, o1, o2, e1, e2, e3].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss coefficients must be non-negative".into());
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("refiner_lr", self.refiner_lr)] {
            if !(lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.demos_per_task == 0 {
            return bad("demos_per_task must be positive".into());
        }
        if self.refine_batch_size == 0 || self.eval_trials == 0 || self.snapshot_period == 0 {
            return bad("refine_batch_size, eval_trials and snapshot_period must be positive".into());
        }
        if !(self.updates_per_step >= 0.0) {
            return bad("updates_per_step must be non-negative".into());
        }
        if self.talk.window == 0 || !(self.talk.sigma >= 0.0) {
            return bad("talk-tweak window must be positive and sigma non-negative".into());
        }
        Ok(())
    }
}
