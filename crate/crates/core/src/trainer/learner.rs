//! Owned training state: actors, per-task critics, optimizers.

use serde::{Deserialize, Serialize};

use crate::actors::{
    feature_dim, primary_loss, refinement_loss, DualActor, PrimaryActor, PrimaryLossConfig, RefinementActor,
    RefinementLossConfig, TaskEncoder,
};
use crate::codec::{read_params, read_spec, write_params, write_spec, ByteReader, ByteWriter};
use crate::critics::{bellman_loss, calql_loss, TaskCritic};
use crate::domain::Transition;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Mlp, SimRng};
use crate::replay::{ReplayBuffer, Sampled};

use super::TrainConfig;

/// Versioned, immutable copy of everything an actor needs for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub version: u64,
    pub actor: DualActor,
}

fn write_mlp(w: &mut ByteWriter, m: &Mlp) {
    write_spec(w, &m.spec);
    write_params(w, &m.params);
}

fn read_mlp(r: &mut ByteReader<'_>) -> Result<Mlp> {
    let spec = read_spec(r)?;
    let params = read_params(r)?;
    if params.layout != spec.layout() {
        return Err(Error::Codec("parameter layout does not match spec".into()));
    }
    Ok(Mlp { spec, params })
}

impl PolicySnapshot {
    pub fn write(&self, w: &mut ByteWriter) {
        w.u64(self.version);
        w.f64(self.actor.noise_scale);
        w.u32(self.actor.n_tasks() as u32);
        write_mlp(w, &self.actor.encoder.net);
        write_mlp(w, &self.actor.primary.net);
        write_mlp(w, &self.actor.refiner.net);
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let version = r.u64()?;
        let noise_scale = r.f64()?;
        let n_tasks = r.u32()? as usize;
        let encoder = read_mlp(r)?;
        let primary = read_mlp(r)?;
        let refiner = read_mlp(r)?;
        if encoder.spec.input_dim() != feature_dim(n_tasks) {
            return Err(Error::Codec("encoder input does not match task count".into()));
        }
        Ok(Self {
            version,
            actor: DualActor {
                encoder: TaskEncoder { net: encoder, n_tasks },
                primary: PrimaryActor { net: primary },
                refiner: RefinementActor { net: refiner },
                noise_scale,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let s = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Codec("trailing bytes after snapshot".into()));
        }
        Ok(s)
    }
}

/// Loss components of one learner update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub critic_loss: Vec<f64>,
    pub conservative: Vec<f64>,
    pub actor_loss: f64,
    pub bc: f64,
    pub q_term: f64,
    pub q_bars: Vec<f64>,
    pub task_weights: Vec<f64>,
    pub lambda: (f64, f64),
    pub refine: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Learner {
    pub cfg: TrainConfig,
    pub actor: DualActor,
    pub critics: Vec<TaskCritic>,
    actor_opt: AdamState,
    refiner_opt: AdamState,
    critic_opts: Vec<AdamState>,
    rng: SimRng,
    pub updates: u64,
    pub version: u64,
}

fn split(batch: &[Sampled]) -> (Vec<Transition>, Vec<f64>) {
    batch
        .iter()
        .map(|s| (s.transition, s.mc_return.unwrap_or(0.0)))
        .unzip()
}

impl Learner {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_tasks();
        let mut rng = SimRng::seed_from(cfg.seed);
        let actor = DualActor::new(n, &cfg.actor, rng.next_u64())?;
        let hidden = [cfg.critic_hidden, cfg.critic_hidden];
        let critics = (0..n)
            .map(|_| {
                TaskCritic::new(feature_dim(n), &hidden, rng.next_u64()).map(|mut c| {
                    c.value_range = cfg.clip_q_targets.then_some((0.0, 1.0));
                    c
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            actor_opt: AdamState::for_params(&actor.primary.net.params),
            refiner_opt: AdamState::for_params(&actor.refiner.net.params),
            critic_opts: critics.iter().map(|c| AdamState::for_params(&c.online.params)).collect(),
            rng: rng.fork(0x1ea7),
            actor,
            critics,
            cfg,
            updates: 0,
            version: 0,
        })
    }

    /// Replaces the actor stack with a snapshot's (optimizer state kept).
    pub fn load_snapshot(&mut self, snap: &PolicySnapshot) -> Result<()> {
        if snap.actor.primary.net.spec != self.actor.primary.net.spec
            || snap.actor.refiner.net.spec != self.actor.refiner.net.spec
        {
            return Err(Error::InvalidArgument("snapshot architecture differs from config".into()));
        }
        self.actor = snap.actor.clone();
        self.version = snap.version;
        Ok(())
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            version: self.version,
            actor: self.actor.clone(),
        }
    }

    fn weighting(&self) -> Option<crate::critics::TaskWeightConfig> {
        (!self.cfg.disable_epsilon_weighting).then_some(self.cfg.task_weights)
    }

    fn update_primary(&mut self, per_task: &[Vec<Transition>], lambda: (f64, f64), log: &mut StepLog) -> Result<()> {
        let pcfg = PrimaryLossConfig {
            lambda_bc: lambda.0,
            lambda_q: lambda.1,
            weighting: self.weighting(),
        };
        let loss = primary_loss(&self.actor, &self.critics, per_task, &pcfg, &mut self.rng)?;
        self.actor_opt
            .step(&mut self.actor.primary.net.params, &loss.grad, self.cfg.actor_lr)?;
        log.actor_loss = loss.total;
        log.bc = loss.bc;
        log.q_term = loss.q_term;
        log.q_bars = loss.q_bars;
        log.task_weights = loss.task_weights;
        log.lambda = lambda;
        Ok(())
    }

    fn finish(&mut self) {
        self.updates += 1;
        self.version += 1;
    }

    /// Calibrated critic updates on `B/N` demo draws per task, then one
    /// shared primary-actor update.
    pub fn warmup_step(&mut self, buf: &ReplayBuffer) -> Result<StepLog> {
        let batches = buf.sample_warmup(self.cfg.batch_size, &mut self.rng)?;
        let mut log = StepLog::default();
        let mut per_task = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let (ts, mc) = split(batch);
            let loss = calql_loss(
                &self.critics[i],
                &self.actor,
                &ts,
                &mc,
                self.cfg.gamma,
                &self.cfg.calql,
                &mut self.rng,
            )?;
            self.critic_opts[i].step(&mut self.critics[i].online.params, &loss.grad, self.cfg.critic_lr)?;
            self.critics[i].update_target(self.cfg.tau)?;
            log.critic_loss.push(loss.total);
            log.conservative.push(loss.conservative);
            per_task.push(ts);
        }
        self.update_primary(&per_task, self.cfg.lambda_warmup, &mut log)?;
        self.finish();
        Ok(log)
    }

    /// Bellman critic updates on mixed demo/rollout batches, the shared
    /// primary-actor update, and a refinement-actor update on talk-and-tweak
    /// records when any exist.
    pub fn online_step(&mut self, buf: &ReplayBuffer) -> Result<StepLog> {
        let batches = buf.sample_online(self.cfg.batch_size, &mut self.rng)?;
        let mut log = StepLog::default();
        let mut per_task = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let (ts, _) = split(batch);
            let loss = bellman_loss(&self.critics[i], &self.actor, &ts, self.cfg.gamma, &mut self.rng)?;
            self.critic_opts[i].step(&mut self.critics[i].online.params, &loss.grad, self.cfg.critic_lr)?;
            self.critics[i].update_target(self.cfg.tau)?;
            log.critic_loss.push(loss.total);
            log.conservative.push(0.0);
            per_task.push(ts);
        }
        self.update_primary(&per_task, self.cfg.lambda_online, &mut log)?;
        if !self.cfg.disable_dual_actor && !buf.talk_tweak().is_empty() {
            let records = buf.sample_talk_tweak(self.cfg.refine_batch_size, &mut self.rng)?;
            let (e1, e2, e3) = self.cfg.eta;
            let rcfg = RefinementLossConfig {
                eta_bc: e1,
                eta_q: e2,
                eta_reg: e3,
            };
            let loss = refinement_loss(&self.actor, &self.critics, &records, &rcfg, &mut self.rng)?;
            self.refiner_opt
                .step(&mut self.actor.refiner.net.params, &loss.grad, self.cfg.refiner_lr)?;
            log.refine = Some((loss.bc, loss.q_term, loss.reg));
        }
        self.finish();
        Ok(log)
    }

    /// Serialized learner state for checkpoints.
    pub(crate) fn write_state(&self, w: &mut ByteWriter) {
        self.snapshot().write(w);
        w.u64(self.updates);
        w.u32(self.critics.len() as u32);
        for c in &self.critics {
            write_mlp(w, &c.online);
            write_mlp(w, &c.target);
        }
        let adam = |w: &mut ByteWriter, a: &AdamState| {
            w.u64(a.step_count);
            w.u32(a.first_moment.len() as u32);
            w.f64s(&a.first_moment);
            w.f64s(&a.second_moment);
        };
        adam(w, &self.actor_opt);
        adam(w, &self.refiner_opt);
        for a in &self.critic_opts {
            adam(w, a);
        }
        w.str(&serde_json::to_string(&self.rng).expect("rng state serializes"));
    }

    pub(crate) fn read_state(cfg: TrainConfig, r: &mut ByteReader<'_>) -> Result<Self> {
        let mut l = Self::new(cfg)?;
        let snap = PolicySnapshot::read(r)?;
        l.load_snapshot(&snap)?;
        l.updates = r.u64()?;
        let n = r.u32()? as usize;
        if n != l.critics.len() {
            return Err(Error::Codec(format!("checkpoint has {n} critics, config has {}", l.critics.len())));
        }
        for c in l.critics.iter_mut() {
            c.online = read_mlp(r)?;
            c.target = read_mlp(r)?;
        }
        let adam = |r: &mut ByteReader<'_>, a: &mut AdamState| -> Result<()> {
            a.step_count = r.u64()?;
            let len = r.u32()? as usize;
            if len != a.first_moment.len() {
                return Err(Error::Codec("optimizer state size mismatch".into()));
            }
            for v in a.first_moment.iter_mut() {
                *v = r.f64()?;
            }
            for v in a.second_moment.iter_mut() {
                *v = r.f64()?;
            }
            Ok(())
        };
        adam(r, &mut l.actor_opt)?;
        adam(r, &mut l.refiner_opt)?;
        for a in l.critic_opts.iter_mut() {
            adam(r, a)?;
        }
        l.rng = serde_json::from_str(&r.string()?).map_err(|e| Error::Codec(format!("rng state: {e}")))?;
        Ok(l)
    }
}
