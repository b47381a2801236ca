//! The dual-actor policy stack.
//!
//! - [`TaskEncoder`]: frozen affine-plus-tanh map from observation features
//!   (with a one-hot task id) to a task embedding `h`.
//! - [`PrimaryActor`]: single-step noise-conditioned policy `a = f(h, w)`,
//!   tanh-bounded in the normalized action box.
//! - [`RefinementActor`]: predicts the latent noise mean `μ` from observation
//!   features and an encoded refinement command.
//!
//! Both sampling modes share the reparameterisation `w = μ + K z`, with
//! `μ = 0` in the primary mode.

use serde::{Deserialize, Serialize};

use crate::critics::{task_weights, TaskCritic, TaskWeightConfig};
use crate::domain::{
    encode_command, wrap_angle, Action, GripState, Observation, RefinementCommand, TalkTweakRecord, Transition,
    ACTION_DIM, COMMAND_DIM,
};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{backward, shift_scale, Activation, Mlp, MlpSpec, ParamVector, SimRng, Tape};

/// Observation features before the one-hot task block.
pub const BASE_FEATURE_DIM: usize = 36;
const POS_SCALE: f64 = 0.1;
const REL_SCALE: f64 = 0.05;
const ROT_REL_SCALE: f64 = 0.1;
/// Saturating scales that keep millimetre errors visible.
const FINE_GRASP_SCALE: f64 = 0.02;
const FINE_GOAL_SCALE: f64 = 0.01;
const STEP_SCALE: f64 = 50.0;

pub fn feature_dim(n_tasks: usize) -> usize {
    BASE_FEATURE_DIM + n_tasks
}

/// Normalized observation vector shared by the encoder, the refinement
/// actor and the critics. Absolute poses are scaled to roughly unit range
/// and the relative vectors the controllers need (object minus gripper,
/// goal minus object, wrapped goal rotation error) are included explicitly,
/// plus tanh-squashed fine-scale copies of the two translational ones.
pub fn obs_features(obs: &Observation, n_tasks: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_dim(n_tasks));
    f.extend(obs.ee_pos.iter().map(|v| v / POS_SCALE));
    f.extend_from_slice(&obs.ee_rpy);
    f.push(if obs.grip_state == GripState::Closed { 1.0 } else { -1.0 });
    f.extend(obs.object_pose[..3].iter().map(|v| v / POS_SCALE));
    f.extend_from_slice(&obs.object_pose[3..]);
    f.extend(obs.goal_pose[..3].iter().map(|v| v / POS_SCALE));
    f.extend_from_slice(&obs.goal_pose[3..]);
    f.push(if obs.attached { 1.0 } else { -1.0 });
    f.push(obs.step_index as f64 / STEP_SCALE);
    for d in 0..3 {
        f.push((obs.object_pose[d] - obs.ee_pos[d]) / REL_SCALE);
    }
    for d in 0..3 {
        f.push((obs.goal_pose[d] - obs.object_pose[d]) / REL_SCALE);
    }
    for d in 0..3 {
        f.push(wrap_angle(obs.goal_pose[3 + d] - obs.object_pose[3 + d]) / ROT_REL_SCALE);
    }
    for d in 0..3 {
        f.push(((obs.object_pose[d] - obs.ee_pos[d]) / FINE_GRASP_SCALE).tanh());
    }
    for d in 0..3 {
        f.push(((obs.goal_pose[d] - obs.object_pose[d]) / FINE_GOAL_SCALE).tanh());
    }
    for t in 0..n_tasks {
        f.push(if t == obs.task_id { 1.0 } else { 0.0 });
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(pub Vec<f64>);

/// Frozen stand-in for the pretrained backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEncoder {
    pub net: Mlp,
    pub n_tasks: usize,
}

impl TaskEncoder {
    pub fn new(n_tasks: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(vec![feature_dim(n_tasks), embed_dim], Activation::Tanh, Activation::Tanh)?;
        Ok(Self {
            net: Mlp::new(spec, seed)?,
            n_tasks,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.net.spec.output_dim()
    }

    pub fn encode_features(&self, features: &[f64]) -> Result<TaskEmbedding> {
        Ok(TaskEmbedding(self.net.forward(features)?))
    }

    pub fn encode_task(&self, obs: &Observation) -> Result<TaskEmbedding> {
        if obs.task_id >= self.n_tasks {
            return Err(Error::InvalidArgument(format!("task id {} out of range", obs.task_id)));
        }
        self.encode_features(&obs_features(obs, self.n_tasks))
    }
}

/// Prefix-masked average pooling over a `(T, H, D)` key/value cache,
/// returning `flatten(K_pool) ++ flatten(V_pool)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensor {
    pub t: usize,
    pub h: usize,
    pub d: usize,
    /// Row-major `(T, H, D)`.
    pub data: Vec<f64>,
}

impl KvTensor {
    pub fn new(t: usize, h: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("kv tensor", t * h * d, data.len())?;
        Ok(Self { t, h, d, data })
    }
}

pub fn pooled_prefix_embedding(k: &KvTensor, v: &KvTensor, mask: &[u8]) -> Result<Vec<f64>> {
    if (k.t, k.h, k.d) != (v.t, v.h, v.d) {
        return Err(Error::InvalidArgument("K and V shapes differ".into()));
    }
    check_dim("prefix mask", k.t, mask.len())?;
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::InvalidArgument("prefix mask must be 0/1".into()));
    }
    let count: f64 = mask.iter().map(|&m| m as f64).sum();
    if count == 0.0 {
        return Err(Error::InvalidArgument("prefix mask selects no tokens".into()));
    }
    let hd = k.h * k.d;
    let mut out = vec![0.0; 2 * hd];
    for (t, &m) in mask.iter().enumerate() {
        let m = m as f64;
        let row = t * hd..(t + 1) * hd;
        for (o, x) in out[..hd].iter_mut().zip(&k.data[row.clone()]) {
            *o += x * m;
        }
        for (o, x) in out[hd..].iter_mut().zip(&v.data[row]) {
            *o += x * m;
        }
    }
    out.iter_mut().for_each(|x| *x /= count);
    Ok(out)
}

/// `f(h, w)`: tanh output in the normalized action box.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryActor {
    pub net: Mlp,
}

impl PrimaryActor {
    pub fn new(embed_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![embed_dim + ACTION_DIM];
        dims.extend_from_slice(hidden);
        dims.push(ACTION_DIM);
        let spec = MlpSpec::new(dims, Activation::Tanh, Activation::Tanh)?;
        Ok(Self { net: Mlp::new(spec, seed)? })
    }

    fn input(h: &TaskEmbedding, w: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(h.0.len() + w.len());
        x.extend_from_slice(&h.0);
        x.extend_from_slice(w);
        x
    }

    /// Normalized action and the tape for back-propagation.
    pub fn forward_tape(&self, h: &TaskEmbedding, w: &[f64]) -> Result<Tape> {
        check_dim("noise vector", ACTION_DIM, w.len())?;
        self.net.tape(&Self::input(h, w))
    }

    pub fn normalized_action(&self, h: &TaskEmbedding, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("noise vector", ACTION_DIM, w.len())?;
        self.net.forward(&Self::input(h, w))
    }

    pub fn primary_action(&self, h: &TaskEmbedding, w: &NoiseVector) -> Result<Action> {
        Ok(Action::from_normalized(&self.normalized_action(h, &w.0)?))
    }

    /// Jacobian-vector style helper: gradient of `upstream · f(h, w)` with
    /// respect to `w` (parameters untouched).
    pub fn noise_grad(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        let input_grad = backward_input(&self.net, tape, upstream)?;
        Ok(input_grad[input_grad.len() - ACTION_DIM..].to_vec())
    }
}

/// `μ = g(features, command)`, unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementActor {
    pub net: Mlp,
}

impl RefinementActor {
    pub fn new(feature_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![feature_dim + COMMAND_DIM];
        dims.extend_from_slice(hidden);
        dims.push(ACTION_DIM);
        let spec = MlpSpec::new(dims, Activation::Tanh, Activation::Identity)?;
        Ok(Self { net: Mlp::new(spec, seed)? })
    }

    fn input(features: &[f64], cmd: &RefinementCommand) -> Vec<f64> {
        let mut x = features.to_vec();
        x.extend_from_slice(&encode_command(cmd));
        x
    }

    pub fn noise_mean(&self, features: &[f64], cmd: &RefinementCommand) -> Result<Vec<f64>> {
        self.net.forward(&Self::input(features, cmd))
    }

    pub fn tape(&self, features: &[f64], cmd: &RefinementCommand) -> Result<Tape> {
        self.net.tape(&Self::input(features, cmd))
    }
}

/// Input-gradient-only backward pass (parameter gradients discarded).
pub(crate) fn backward_input(net: &Mlp, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
    let mut scratch = net.zero_grad();
    backward(&net.params, &net.spec, tape, upstream, &mut scratch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub noise_scale: f64,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            noise_scale: 1.0,
        }
    }
}

/// Encoder, primary actor and refinement actor with the shared noise scale `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualActor {
    pub encoder: TaskEncoder,
    pub primary: PrimaryActor,
    pub refiner: RefinementActor,
    pub noise_scale: f64,
}

impl DualActor {
    pub fn new(n_tasks: usize, cfg: &ActorConfig, seed: u64) -> Result<Self> {
        if !(cfg.noise_scale > 0.0) {
            return Err(Error::InvalidArgument("noise scale K must be positive".into()));
        }
        let mut rng = SimRng::seed_from(seed);
        let encoder = TaskEncoder::new(n_tasks, cfg.embed_dim, rng.next_u64())?;
        let primary = PrimaryActor::new(cfg.embed_dim, &[cfg.hidden, cfg.hidden], rng.next_u64())?;
        let refiner = RefinementActor::new(feature_dim(n_tasks), &[cfg.hidden, cfg.hidden], rng.next_u64())?;
        Ok(Self {
            encoder,
            primary,
            refiner,
            noise_scale: cfg.noise_scale,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.encoder.n_tasks
    }

    pub fn features(&self, obs: &Observation) -> Vec<f64> {
        obs_features(obs, self.n_tasks())
    }

    pub fn embed(&self, obs: &Observation) -> Result<TaskEmbedding> {
        self.encoder.encode_task(obs)
    }

    /// Primary mode: `w ~ N(0, K² I)`.
    pub fn sample_primary(&self, h: &TaskEmbedding, rng: &mut SimRng) -> Result<Action> {
        let z = rng.standard_normal_vec(ACTION_DIM);
        let w = shift_scale(&[0.0; ACTION_DIM], self.noise_scale, &z);
        self.primary.primary_action(h, &NoiseVector(w))
    }

    /// Refinement mode: `w ~ N(μ(s, cmd), K² I)`.
    pub fn sample_refined(
        &self,
        h: &TaskEmbedding,
        features: &[f64],
        cmd: &RefinementCommand,
        rng: &mut SimRng,
    ) -> Result<Action> {
        let mu = self.refiner.noise_mean(features, cmd)?;
        let z = rng.standard_normal_vec(ACTION_DIM);
        let w = shift_scale(&mu, self.noise_scale, &z);
        self.primary.primary_action(h, &NoiseVector(w))
    }

    /// Policy action for one observation, refined when a command is given.
    pub fn act(&self, obs: &Observation, cmd: Option<&RefinementCommand>, rng: &mut SimRng) -> Result<Action> {
        let h = self.embed(obs)?;
        match cmd {
            None => self.sample_primary(&h, rng),
            Some(c) => self.sample_refined(&h, &self.features(obs), c, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimaryLossConfig {
    pub lambda_bc: f64,
    pub lambda_q: f64,
    /// `None` fixes every task weight at 1.
    pub weighting: Option<TaskWeightConfig>,
}

#[derive(Debug, Clone)]
pub struct PrimaryLoss {
    pub total: f64,
    pub bc: f64,
    /// `-(1/N) Σ ε_i Q̄_i`, before multiplying by `λ2`.
    pub q_term: f64,
    pub q_bars: Vec<f64>,
    pub task_weights: Vec<f64>,
    pub grad: ParamVector,
}

/// Hybrid BC + task-weighted Q objective for the primary actor. Critic
/// parameters are constants here; the Q gradient reaches the actor through
/// the critic's action input. Task weights are computed from this batch's
/// `Q̄_i` and treated as constants.
pub fn primary_loss(
    actor: &DualActor,
    critics: &[TaskCritic],
    per_task: &[Vec<Transition>],
    cfg: &PrimaryLossConfig,
    rng: &mut SimRng,
) -> Result<PrimaryLoss> {
    let n_total: usize = per_task.iter().map(Vec::len).sum();
    if n_total == 0 {
        return Err(Error::EmptyBatch("primary actor batch"));
    }
    if critics.len() < per_task.len() {
        return Err(Error::InvalidArgument(format!(
            "{} critics for {} task batches",
            critics.len(),
            per_task.len()
        )));
    }
    struct Item {
        task: usize,
        target: [f64; ACTION_DIM],
        actor_tape: Tape,
        critic_tape: Tape,
        q: f64,
    }
    let k = actor.noise_scale;
    let mut items = Vec::with_capacity(n_total);
    for (task, batch) in per_task.iter().enumerate() {
        for t in batch {
            let feats = actor.features(&t.obs);
            let h = actor.encoder.encode_features(&feats)?;
            let z = rng.standard_normal_vec(ACTION_DIM);
            let w = shift_scale(&[0.0; ACTION_DIM], k, &z);
            let actor_tape = actor.primary.forward_tape(&h, &w)?;
            let (q, critic_tape) = critics[task].q_tape(&feats, actor_tape.output())?;
            items.push(Item {
                task,
                target: t.action.normalized(),
                actor_tape,
                critic_tape,
                q,
            });
        }
    }

    let active: Vec<usize> = (0..per_task.len()).filter(|&i| !per_task[i].is_empty()).collect();
    let n_active = active.len() as f64;
    let mut q_bars = vec![0.0; per_task.len()];
    for it in &items {
        q_bars[it.task] += it.q / per_task[it.task].len() as f64;
    }
    let weights = match &cfg.weighting {
        Some(wc) => {
            let active_q: Vec<f64> = active.iter().map(|&i| q_bars[i]).collect();
            let eps = task_weights(&active_q, wc)?;
            let mut full = vec![1.0; per_task.len()];
            for (slot, &i) in active.iter().enumerate() {
                full[i] = eps[slot];
            }
            full
        }
        None => vec![1.0; per_task.len()],
    };

    let mut grad = actor.primary.net.zero_grad();
    let mut bc = 0.0;
    let mut q_term = 0.0;
    for &i in &active {
        q_term -= weights[i] * q_bars[i] / n_active;
    }
    for it in &items {
        let out = it.actor_tape.output();
        let n_task = per_task[it.task].len() as f64;
        let dq_da = critics[it.task].action_grad(&it.critic_tape)?;
        let q_coef = -cfg.lambda_q * weights[it.task] / (n_active * n_task);
        let mut upstream = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            let diff = out[d] - it.target[d];
            bc += diff * diff / n_total as f64;
            upstream[d] = cfg.lambda_bc * 2.0 * diff / n_total as f64 + q_coef * dq_da[d];
        }
        actor.primary.net.backward(&it.actor_tape, &upstream, &mut grad)?;
    }
    Ok(PrimaryLoss {
        total: cfg.lambda_bc * bc + cfg.lambda_q * q_term,
        bc,
        q_term,
        q_bars,
        task_weights: weights,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementLossConfig {
    pub eta_bc: f64,
    pub eta_q: f64,
    pub eta_reg: f64,
}

#[derive(Debug, Clone)]
pub struct RefinementLoss {
    pub total: f64,
    pub bc: f64,
    /// `-mean Q`, before multiplying by `η2`.
    pub q_term: f64,
    pub reg: f64,
    pub grad: ParamVector,
}

/// Loss for the refinement actor on talk-and-tweak records; the primary
/// actor and critics are frozen. One base draw `z` per record is shared by
/// the commanded branch and both regularisation branches
/// (`w = μ + K z` against `w = K z`, the latter evaluated with `[null]`).
pub fn refinement_loss(
    actor: &DualActor,
    critics: &[TaskCritic],
    records: &[TalkTweakRecord],
    cfg: &RefinementLossConfig,
    rng: &mut SimRng,
) -> Result<RefinementLoss> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("refinement batch"));
    }
    let n = records.len() as f64;
    let k = actor.noise_scale;
    let mut grad = actor.refiner.net.zero_grad();
    let (mut bc, mut q_term, mut reg) = (0.0, 0.0, 0.0);
    for r in records {
        let task = r.obs.task_id;
        let critic = critics
            .get(task)
            .ok_or_else(|| Error::InvalidArgument(format!("no critic for task {task}")))?;
        let feats = actor.features(&r.obs);
        let h = actor.encoder.encode_features(&feats)?;
        let z = rng.standard_normal_vec(ACTION_DIM);
        let target = r.action.normalized();

        // Commanded branch: BC and Q terms.
        let ref_tape = actor.refiner.tape(&feats, &r.command)?;
        let w = shift_scale(ref_tape.output(), k, &z);
        let a_tape = actor.primary.forward_tape(&h, &w)?;
        let a = a_tape.output();
        let (q, c_tape) = critic.q_tape(&feats, a)?;
        let dq_da = critic.action_grad(&c_tape)?;
        let mut up = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            let diff = a[d] - target[d];
            bc += diff * diff / n;
            up[d] = cfg.eta_bc * 2.0 * diff / n - cfg.eta_q * dq_da[d] / n;
        }
        q_term -= q / n;
        let dmu = actor.primary.noise_grad(&a_tape, &up)?;
        actor.refiner.net.backward(&ref_tape, &dmu, &mut grad)?;

        // Regularisation branch with the [null] command.
        let null_tape = actor.refiner.tape(&feats, &RefinementCommand::NULL)?;
        let w_null = shift_scale(null_tape.output(), k, &z);
        let w_base = shift_scale(&[0.0; ACTION_DIM], k, &z);
        let a_null_tape = actor.primary.forward_tape(&h, &w_null)?;
        let a_base = actor.primary.normalized_action(&h, &w_base)?;
        let a_null = a_null_tape.output();
        let mut up = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            let diff = a_null[d] - a_base[d];
            reg += diff * diff / n;
            up[d] = cfg.eta_reg * 2.0 * diff / n;
        }
        if cfg.eta_reg != 0.0 {
            let dmu = actor.primary.noise_grad(&a_null_tape, &up)?;
            actor.refiner.net.backward(&null_tape, &dmu, &mut grad)?;
        }
    }
    Ok(RefinementLoss {
        total: cfg.eta_bc * bc + cfg.eta_q * q_term + cfg.eta_reg * reg,
        bc,
        q_term,
        reg,
        grad,
    })
}
