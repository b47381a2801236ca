//! Per-task Q-functions, their warm-up (calibrated conservative) and
//! online (Bellman) losses, and the adaptive task weights.

use serde::{Deserialize, Serialize};

use crate::actors::{backward_input, DualActor};
use crate::domain::{Action, Transition, ACTION_DIM};
use crate::error::{Error, Result};
use crate::numerics::{polyak_in_place, shift_scale, Activation, Mlp, MlpSpec, ParamVector, SimRng, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskCritic {
    pub online: Mlp,
    pub target: Mlp,
    /// Bootstrap targets are clamped to this range when set.
    pub value_range: Option<(f64, f64)>,
}

impl TaskCritic {
    pub fn new(feature_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![feature_dim + ACTION_DIM];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let spec = MlpSpec::new(dims, Activation::Tanh, Activation::Identity)?;
        let online = Mlp::new(spec, seed)?;
        Ok(Self {
            target: online.clone(),
            online,
            value_range: None,
        })
    }

    fn input(features: &[f64], action_norm: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(features.len() + action_norm.len());
        x.extend_from_slice(features);
        x.extend_from_slice(action_norm);
        x
    }

    /// `Q(s, a)` with the action in normalized coordinates.
    pub fn q(&self, features: &[f64], action_norm: &[f64]) -> Result<f64> {
        Ok(self.online.forward(&Self::input(features, action_norm))?[0])
    }

    pub fn q_value(&self, features: &[f64], action: &Action) -> Result<f64> {
        self.q(features, &action.normalized())
    }

    pub fn target_q(&self, features: &[f64], action_norm: &[f64]) -> Result<f64> {
        Ok(self.target.forward(&Self::input(features, action_norm))?[0])
    }

    pub fn q_tape(&self, features: &[f64], action_norm: &[f64]) -> Result<(f64, Tape)> {
        let tape = self.online.tape(&Self::input(features, action_norm))?;
        Ok((tape.output()[0], tape))
    }

    /// `∂Q/∂a` (normalized action) from a recorded pass.
    pub fn action_grad(&self, tape: &Tape) -> Result<[f64; ACTION_DIM]> {
        let g = backward_input(&self.online, tape, &[1.0])?;
        let mut out = [0.0; ACTION_DIM];
        out.copy_from_slice(&g[g.len() - ACTION_DIM..]);
        Ok(out)
    }

    pub fn update_target(&mut self, tau: f64) -> Result<()> {
        polyak_in_place(&mut self.target.params, &self.online.params, tau)
    }
}

#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub total: f64,
    pub bellman: f64,
    /// Calibrated conservative gap, before multiplying by `α` (0 for Bellman).
    pub conservative: f64,
    pub grad: ParamVector,
}

/// `r + γ (1 - done) Q_target(s', f(h', w'))`, `w' ~ N(0, K² I)`.
pub fn bellman_targets(
    critic: &TaskCritic,
    actor: &DualActor,
    batch: &[Transition],
    gamma: f64,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            let z = rng.standard_normal_vec(ACTION_DIM);
            if t.done {
                return Ok(t.reward);
            }
            let feats = actor.features(&t.next_obs);
            let h = actor.encoder.encode_features(&feats)?;
            let w = shift_scale(&[0.0; ACTION_DIM], actor.noise_scale, &z);
            let a_next = actor.primary.normalized_action(&h, &w)?;
            let y = t.reward + gamma * critic.target_q(&feats, &a_next)?;
            Ok(match critic.value_range {
                Some((lo, hi)) => y.clamp(lo, hi),
                None => y,
            })
        })
        .collect()
}

/// Mean squared TD error against fixed targets; gradients for the online
/// parameters only.
pub fn bellman_loss(
    critic: &TaskCritic,
    actor: &DualActor,
    batch: &[Transition],
    gamma: f64,
    rng: &mut SimRng,
) -> Result<CriticLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("critic batch"));
    }
    let targets = bellman_targets(critic, actor, batch, gamma, rng)?;
    let mut grad = critic.online.zero_grad();
    let bellman = accumulate_td(critic, actor, batch, &targets, &mut grad)?;
    Ok(CriticLoss {
        total: bellman,
        bellman,
        conservative: 0.0,
        grad,
    })
}

fn accumulate_td(
    critic: &TaskCritic,
    actor: &DualActor,
    batch: &[Transition],
    targets: &[f64],
    grad: &mut ParamVector,
) -> Result<f64> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (t, y) in batch.iter().zip(targets) {
        let feats = actor.features(&t.obs);
        let (q, tape) = critic.q_tape(&feats, &t.action.normalized())?;
        let diff = q - y;
        loss += diff * diff / n;
        critic.online.backward(&tape, &[2.0 * diff / n], grad)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalQlConfig {
    pub alpha: f64,
    pub policy_samples: usize,
}

impl Default for CalQlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            policy_samples: 4,
        }
    }
}

/// Bellman loss plus `α (mean max(Q(s, a_π), G(s)) − mean Q(s, a))`, where
/// `G(s)` is the Monte-Carlo return of the demonstration the state came from.
pub fn calql_loss(
    critic: &TaskCritic,
    actor: &DualActor,
    batch: &[Transition],
    mc_returns: &[f64],
    gamma: f64,
    cfg: &CalQlConfig,
    rng: &mut SimRng,
) -> Result<CriticLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("critic batch"));
    }
    if mc_returns.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "calibrated loss needs one Monte-Carlo return per transition ({} for {})",
            mc_returns.len(),
            batch.len()
        )));
    }
    if cfg.policy_samples == 0 {
        return Err(Error::InvalidArgument("policy_samples must be positive".into()));
    }
    let targets = bellman_targets(critic, actor, batch, gamma, rng)?;
    let mut grad = critic.online.zero_grad();
    let bellman = accumulate_td(critic, actor, batch, &targets, &mut grad)?;
    if cfg.alpha == 0.0 {
        return Ok(CriticLoss {
            total: bellman,
            bellman,
            conservative: 0.0,
            grad,
        });
    }
    let n = batch.len() as f64;
    let m = cfg.policy_samples as f64;
    let mut push_down = 0.0;
    let mut data_q = 0.0;
    for (t, &g) in batch.iter().zip(mc_returns) {
        let feats = actor.features(&t.obs);
        let h = actor.encoder.encode_features(&feats)?;
        for _ in 0..cfg.policy_samples {
            let z = rng.standard_normal_vec(ACTION_DIM);
            let w = shift_scale(&[0.0; ACTION_DIM], actor.noise_scale, &z);
            let a_pi = actor.primary.normalized_action(&h, &w)?;
            let (q_pi, tape) = critic.q_tape(&feats, &a_pi)?;
            if q_pi > g {
                push_down += q_pi / (n * m);
                critic.online.backward(&tape, &[cfg.alpha / (n * m)], &mut grad)?;
            } else {
                push_down += g / (n * m);
            }
        }
        let (q_data, tape) = critic.q_tape(&feats, &t.action.normalized())?;
        data_q += q_data / n;
        critic.online.backward(&tape, &[-cfg.alpha / n], &mut grad)?;
    }
    let conservative = push_down - data_q;
    Ok(CriticLoss {
        total: bellman + cfg.alpha * conservative,
        bellman,
        conservative,
        grad,
    })
}

/// Discounted return-to-go for every step of one episode.
pub fn monte_carlo_returns(episode: &[Transition], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; episode.len()];
    let mut acc = 0.0;
    for (i, t) in episode.iter().enumerate().rev() {
        acc = t.reward + gamma * acc;
        out[i] = acc;
    }
    out
}

/// `Q̄ = mean_s Q(s, f(h, w))` with a fresh `w` per state.
pub fn mean_task_q(critic: &TaskCritic, actor: &DualActor, batch: &[Transition], rng: &mut SimRng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("task batch"));
    }
    let mut sum = 0.0;
    for t in batch {
        let feats = actor.features(&t.obs);
        let h = actor.encoder.encode_features(&feats)?;
        let z = rng.standard_normal_vec(ACTION_DIM);
        let w = shift_scale(&[0.0; ACTION_DIM], actor.noise_scale, &z);
        let a = actor.primary.normalized_action(&h, &w)?;
        sum += critic.q(&feats, &a)?;
    }
    Ok(sum / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeightConfig {
    pub c: f64,
    pub eps_min: f64,
    pub eps_max: f64,
}

impl Default for TaskWeightConfig {
    fn default() -> Self {
        Self {
            c: 0.1,
            eps_min: 0.8,
            eps_max: 1.2,
        }
    }
}

/// Unclipped weight `Σ_j Q̄_j / (N Q̄_i + N c)`.
pub fn raw_task_weight(q_bars: &[f64], i: usize, c: f64) -> f64 {
    let n = q_bars.len() as f64;
    let sum: f64 = q_bars.iter().sum();
    sum / (n * q_bars[i] + n * c)
}

/// `ε_i = clip(Σ_j Q̄_j / (N Q̄_i + N c), ε_min, ε_max)`. A zero denominator
/// gives ±∞ and clips to the matching bound; `0/0` maps to a neutral 1.
pub fn task_weights(q_bars: &[f64], cfg: &TaskWeightConfig) -> Result<Vec<f64>> {
    if !(cfg.c > 0.0 && cfg.eps_min < cfg.eps_max) {
        return Err(Error::InvalidArgument(format!("invalid task weight config {cfg:?}")));
    }
    if q_bars.is_empty() {
        return Err(Error::InvalidArgument("task weights need at least one task".into()));
    }
    Ok((0..q_bars.len())
        .map(|i| {
            let raw = raw_task_weight(q_bars, i, cfg.c);
            if raw.is_nan() {
                1.0
            } else {
                raw.clamp(cfg.eps_min, cfg.eps_max)
            }
        })
        .collect())
}
