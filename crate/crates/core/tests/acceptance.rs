//! Acceptance suite: one `PASS`/`FAIL` line per criterion and a summary.
//! A failed criterion is reported, not fatal, unless `ACCEPTANCE_STRICT=1`
//! is set; panics and setup errors always fail the run. Positional
//! arguments filter criteria by name substring, e.g.
//! `cargo test --test acceptance -- gradients`.

use std::time::{Duration, Instant};

use dual_actor_rl::actors::{
    feature_dim, pooled_prefix_embedding, primary_loss, refinement_loss, ActorConfig, DualActor, KvTensor,
    PrimaryLossConfig, RefinementLossConfig,
};
use dual_actor_rl::critics::{bellman_loss, calql_loss, task_weights, CalQlConfig, TaskCritic, TaskWeightConfig};
use dual_actor_rl::domain::{Action, RefinementCommand, TalkTweakRecord, Transition};
use dual_actor_rl::env::{rollout, EnvConfig, ExpertPolicy, Scene};
use dual_actor_rl::net::{scaling_benchmark, train_networked, Schedule};
use dual_actor_rl::numerics::{mlp_grad, mlp_forward, Activation, Mlp, MlpSpec, ParamVector, SimRng};
use dual_actor_rl::replay::{Provenance, ReplayBuffer};
use dual_actor_rl::talk_tweak::{annotate, TalkTweakConfig};
use dual_actor_rl::trainer::{
    collect_demos, evaluate, long_horizon, online_phase, warmup_phase, CommandSource, Learner, MetricsLog,
    OnlineMode, OnlineReport, StopRule, TrainConfig,
};

type Outcome = Result<String, String>;

struct Suite {
    filters: Vec<String>,
    failed: usize,
    ran: usize,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.wants(name) {
            return;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        self.ran += 1;
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
/// Components below this are compared absolutely; both sides are then
/// roundoff-level zeros.
const FD_FLOOR: f64 = 1e-8;
const FD_COORDS: usize = 8;

#[derive(Default)]
struct FdStats {
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl FdStats {
    fn compare(&mut self, what: &str, analytic: f64, numeric: f64) {
        self.checks += 1;
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < FD_FLOOR { 0.0 } else { err / scale };
        self.worst = self.worst.max(rel);
        if rel > FD_REL && self.failures.len() < 5 {
            self.failures.push(format!("{what}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
}

/// Compares `grad` with central differences of `loss` along one random
/// direction and at `FD_COORDS` random coordinates.
fn fd_check(
    stats: &mut FdStats,
    what: &str,
    params: &ParamVector,
    grad: &ParamVector,
    rng: &mut SimRng,
    mut loss: impl FnMut(&ParamVector) -> f64,
) {
    let n = params.values.len();
    let mut probe = |dir: &[(usize, f64)]| {
        let mut p = params.clone();
        for &(i, v) in dir {
            p.values[i] += FD_STEP * v;
        }
        let up = loss(&p);
        for &(i, v) in dir {
            p.values[i] = params.values[i] - FD_STEP * v;
        }
        let down = loss(&p);
        (up - down) / (2.0 * FD_STEP)
    };
    let raw: Vec<f64> = rng.standard_normal_vec(n);
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, v)| (i, v / norm)).collect();
    let analytic: f64 = dir.iter().map(|&(i, v)| grad.values[i] * v).sum();
    stats.compare(&format!("{what} direction"), analytic, probe(&dir));
    for _ in 0..FD_COORDS {
        let i = rng.below(n);
        stats.compare(&format!("{what} param {i}"), grad.values[i], probe(&[(i, 1.0)]));
    }
}

/// Real transitions from noisy-expert episodes, with actions and
/// intervention flags re-drawn so batches cover the whole action box.
fn transition_pool(env: &EnvConfig, per_task: usize) -> Vec<Vec<Transition>> {
    (0..env.n_tasks())
        .map(|task| {
            let mut out = Vec::new();
            for k in 0..per_task {
                let seed = 1000 * task as u64 + k as u64;
                let mut scene = Scene::reset(env, task, seed).unwrap();
                out.extend(rollout(&mut scene, &mut ExpertPolicy::noisy(env, seed), None).unwrap().transitions);
            }
            out
        })
        .collect()
}

fn random_action(rng: &mut SimRng) -> Action {
    let n: Vec<f64> = (0..7).map(|_| rng.uniform(-0.99, 0.99)).collect();
    Action::from_normalized(&n)
}

fn draw(pool: &[Transition], n: usize, rng: &mut SimRng) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let mut t = pool[rng.below(pool.len())];
            if rng.uniform01() < 0.5 {
                t.action = random_action(rng);
            }
            t
        })
        .collect()
}

fn random_command(rng: &mut SimRng) -> RefinementCommand {
    loop {
        let axes = [0, 1, 2].map(|_| rng.below(3) as i8 - 1);
        if let Ok(c) = RefinementCommand::new(axes) {
            if !c.is_all_zero() {
                return c;
            }
        }
    }
}

fn perturbed(net: &mut Mlp, rng: &mut SimRng, scale: f64) {
    for v in net.params.values.iter_mut() {
        *v += scale * rng.standard_normal();
    }
}

fn gradient_suite() -> Outcome {
    let env = EnvConfig::default();
    let n_tasks = env.n_tasks();
    let pool = transition_pool(&env, 4);
    let mut rng = SimRng::seed_from(2024);
    let mut stats = FdStats::default();
    let batches = 100;
    for b in 0..batches {
        let mut actor = DualActor::new(n_tasks, &ActorConfig::default(), rng.next_u64()).map_err(|e| e.to_string())?;
        perturbed(&mut actor.primary.net, &mut rng, 0.05);
        perturbed(&mut actor.refiner.net, &mut rng, 0.05);
        let critics: Vec<TaskCritic> = (0..n_tasks)
            .map(|_| {
                let mut c = TaskCritic::new(feature_dim(n_tasks), &[64, 64], rng.next_u64()).unwrap();
                perturbed(&mut c.target, &mut rng, 0.05);
                c.value_range = (rng.uniform01() < 0.5).then_some((0.0, 1.0));
                c
            })
            .collect();
        let per_task: Vec<Vec<Transition>> = pool
            .iter()
            .map(|p| {
                let n = rng.below(4) + usize::from(b % 7 != 0);
                draw(p, n, &mut rng)
            })
            .collect();
        if per_task.iter().all(Vec::is_empty) {
            continue;
        }
        let base = rng.clone();

        // Primary actor: BC, Q, and the task-weighted hybrid with weights
        // frozen at the values computed from the unperturbed batch.
        let weighting = TaskWeightConfig::default();
        for (tag, cfg) in [
            ("primary bc", PrimaryLossConfig { lambda_bc: 1.0, lambda_q: 0.0, weighting: None }),
            ("primary q", PrimaryLossConfig { lambda_bc: 0.0, lambda_q: 1.0, weighting: None }),
            ("primary weighted", PrimaryLossConfig { lambda_bc: 0.5, lambda_q: 0.5, weighting: Some(weighting) }),
        ] {
            let l = primary_loss(&actor, &critics, &per_task, &cfg, &mut base.clone()).map_err(|e| e.to_string())?;
            let eps = l.task_weights.clone();
            let active: Vec<usize> = (0..n_tasks).filter(|&i| !per_task[i].is_empty()).collect();
            fd_check(&mut stats, tag, &actor.primary.net.params, &l.grad, &mut rng, |p| {
                let mut a = actor.clone();
                a.primary.net.params = p.clone();
                let m = primary_loss(&a, &critics, &per_task, &cfg, &mut base.clone()).unwrap();
                let q: f64 = active.iter().map(|&i| eps[i] * m.q_bars[i]).sum::<f64>() / active.len() as f64;
                cfg.lambda_bc * m.bc - cfg.lambda_q * q
            });
        }

        // Refinement actor on talk-and-tweak records.
        let records: Vec<TalkTweakRecord> = per_task
            .iter()
            .flatten()
            .map(|t| TalkTweakRecord {
                obs: t.obs,
                action: t.action,
                command: random_command(&mut rng),
            })
            .collect();
        for (tag, cfg) in [
            ("refinement bc", RefinementLossConfig { eta_bc: 1.0, eta_q: 0.0, eta_reg: 0.0 }),
            ("refinement q", RefinementLossConfig { eta_bc: 0.0, eta_q: 1.0, eta_reg: 0.0 }),
            ("refinement reg", RefinementLossConfig { eta_bc: 0.0, eta_q: 0.0, eta_reg: 1.0 }),
            ("refinement total", RefinementLossConfig { eta_bc: 1.0, eta_q: 0.1, eta_reg: 0.1 }),
        ] {
            let l = refinement_loss(&actor, &critics, &records, &cfg, &mut base.clone()).map_err(|e| e.to_string())?;
            fd_check(&mut stats, tag, &actor.refiner.net.params, &l.grad, &mut rng, |p| {
                let mut a = actor.clone();
                a.refiner.net.params = p.clone();
                refinement_loss(&a, &critics, &records, &cfg, &mut base.clone()).unwrap().total
            });
        }

        // Critics: Bellman and calibrated conservative losses.
        for (task, batch) in per_task.iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let critic = &critics[task];
            let l = bellman_loss(critic, &actor, batch, 0.97, &mut base.clone()).map_err(|e| e.to_string())?;
            fd_check(&mut stats, "bellman", &critic.online.params, &l.grad, &mut rng, |p| {
                let mut c = critic.clone();
                c.online.params = p.clone();
                bellman_loss(&c, &actor, batch, 0.97, &mut base.clone()).unwrap().total
            });
            let mc: Vec<f64> = batch.iter().map(|_| rng.uniform01()).collect();
            let cq = CalQlConfig::default();
            let l = calql_loss(critic, &actor, batch, &mc, 0.97, &cq, &mut base.clone()).map_err(|e| e.to_string())?;
            fd_check(&mut stats, "calibrated", &critic.online.params, &l.grad, &mut rng, |p| {
                let mut c = critic.clone();
                c.online.params = p.clone();
                calql_loss(&c, &actor, batch, &mc, 0.97, &cq, &mut base.clone()).unwrap().total
            });
        }

        // Bare network: upstream · output for a random small MLP.
        let dims = vec![rng.below(6) + 1, rng.below(8) + 2, rng.below(8) + 2, rng.below(4) + 1];
        let hidden = [Activation::Tanh, Activation::Relu][rng.below(2)];
        let out_act = [Activation::Tanh, Activation::Identity][rng.below(2)];
        let spec = MlpSpec::new(dims.clone(), hidden, out_act).map_err(|e| e.to_string())?;
        let mut net = Mlp::new(spec.clone(), rng.next_u64()).map_err(|e| e.to_string())?;
        // Zero initial biases behind a dead ReLU layer put the next layer
        // exactly on the kink; jitter every parameter off it.
        perturbed(&mut net, &mut rng, 0.1);
        let x: Vec<f64> = rng.standard_normal_vec(dims[0]);
        let up: Vec<f64> = rng.standard_normal_vec(dims[3]);
        let (g, _) = mlp_grad(&net.params, &spec, &x, &up).map_err(|e| e.to_string())?;
        fd_check(&mut stats, "mlp", &net.params, &g, &mut rng, |p| {
            let y = mlp_forward(p, &spec, &x).unwrap();
            y.iter().zip(&up).map(|(a, b)| a * b).sum()
        });
    }
    let detail = format!(
        "{} comparisons over {batches} batches, worst relative error {:.2e} (tolerance {FD_REL:e})",
        stats.checks, stats.worst
    );
    if stats.failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", stats.failures.join("; ")))
    }
}

// ------------------------------------------------------------ talk-and-tweak

/// Direct transcription of the window rule: every start whose window is
/// fully intervened, summed translation, strict per-axis threshold, silent
/// windows dropped.
fn oracle_annotate(traj: &[Transition], j: usize, sigma: f64) -> Vec<TalkTweakRecord> {
    let mut out = Vec::new();
    if j == 0 || traj.len() < j {
        return out;
    }
    for t in 0..=traj.len() - j {
        if !traj[t..t + j].iter().all(|s| s.intervened) {
            continue;
        }
        let mut axes = [0i8; 3];
        for (d, axis) in axes.iter_mut().enumerate() {
            let mut sum = 0.0;
            for s in &traj[t..t + j] {
                sum += s.action.dpos[d];
            }
            *axis = if sum > sigma {
                1
            } else if sum < -sigma {
                -1
            } else {
                0
            };
        }
        if axes == [0, 0, 0] {
            continue;
        }
        out.push(TalkTweakRecord {
            obs: traj[t].obs,
            action: traj[t].action,
            command: RefinementCommand::new(axes).unwrap(),
        });
    }
    out
}

fn talk_tweak_oracle() -> Outcome {
    let env = EnvConfig::default();
    let base = Scene::reset(&env, 0, 3).unwrap().observation();
    let mut rng = SimRng::seed_from(77);
    let mut records = 0usize;
    let mut boundary_hits = 0usize;
    let trials = 10_000;
    for trial in 0..trials {
        let j = 1 + rng.below(6);
        // Dyadic thresholds and steps make window sums exact, so sums land
        // on ±σ precisely; the default σ case exercises ordinary decimals.
        let dyadic = trial % 2 == 0;
        let sigma = if dyadic { 2f64.powi(-10) } else { TalkTweakConfig::default().sigma };
        let len = rng.below(51);
        let mut traj = Vec::with_capacity(len);
        let mut intervening = rng.uniform01() < 0.5;
        for step in 0..len {
            if rng.uniform01() < 0.15 {
                intervening = !intervening;
            }
            let mut action = random_action(&mut rng);
            for d in 0..3 {
                action.dpos[d] = if dyadic {
                    (rng.below(9) as f64 - 4.0) * sigma / 4.0
                } else {
                    match rng.below(4) {
                        0 => 0.0,
                        1 => sigma,
                        2 => -sigma,
                        _ => rng.uniform(-0.01, 0.01),
                    }
                };
            }
            let mut obs = base;
            obs.step_index = step as u32;
            traj.push(Transition {
                obs,
                action,
                reward: 0.0,
                next_obs: obs,
                done: step + 1 == len,
                intervened: intervening,
                task_id: 0,
            });
        }
        let cfg = TalkTweakConfig { window: j, sigma };
        let got = annotate(&traj, &cfg);
        let want = oracle_annotate(&traj, j, sigma);
        if got != want {
            return Err(format!("trial {trial} (J={j}, sigma={sigma}): {} vs {} records", got.len(), want.len()));
        }
        records += want.len();
        if len >= j {
            for t in 0..=len - j {
                if traj[t..t + j].iter().all(|s| s.intervened)
                    && (0..3).any(|d| traj[t..t + j].iter().map(|s| s.action.dpos[d]).sum::<f64>().abs() == sigma)
                {
                    boundary_hits += 1;
                }
            }
        }
    }
    check(
        boundary_hits > 0,
        format!("{trials} trajectories, {records} records, {boundary_hits} windows with |sum| = sigma, exact match"),
    )
}

// --------------------------------------------------------------- weighting

fn epsilon_weighting() -> Outcome {
    let cfg = TaskWeightConfig::default();
    let w = task_weights(&[0.9, 0.1, 0.5], &cfg).map_err(|e| e.to_string())?;
    let want = [0.8, 1.2, 1.5 / 1.8];
    let err = w.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err > 1e-12 {
        return Err(format!("hand example gives {w:?}, expected {want:?}"));
    }
    let mut rng = SimRng::seed_from(5);
    let cases = 10_000;
    let mut monotone_cases = 0;
    for case in 0..cases {
        let n = 1 + rng.below(6);
        let q: Vec<f64> = (0..n).map(|_| rng.uniform01()).collect();
        let w = task_weights(&q, &cfg).map_err(|e| e.to_string())?;
        if w.iter().any(|v| !(cfg.eps_min..=cfg.eps_max).contains(v)) {
            return Err(format!("case {case}: {w:?} out of range for {q:?}"));
        }
        for i in 0..n {
            for k in 0..n {
                if q[i] < q[k] && w[i] < w[k] {
                    return Err(format!("case {case}: weaker task {i} weighs less than {k}: {q:?} -> {w:?}"));
                }
            }
        }
        // Raising a task's own value lowers its raw ratio whenever the
        // other tasks' values sum to at least c.
        let i = rng.below(n);
        let others: f64 = q.iter().sum::<f64>() - q[i];
        if others >= cfg.c {
            monotone_cases += 1;
            let mut raised = q.clone();
            raised[i] += rng.uniform01();
            let after = task_weights(&raised, &cfg).map_err(|e| e.to_string())?[i];
            if after > w[i] + 1e-12 {
                return Err(format!("case {case}: raising task {i} raised its weight {} -> {after}", w[i]));
            }
        }
    }
    Ok(format!(
        "hand example max error {err:.1e}; {cases} random inputs in range and ordered, {monotone_cases} monotonicity checks"
    ))
}

// ---------------------------------------------------------------- sampling

fn sampling_ratios() -> Outcome {
    let env = EnvConfig::default();
    let mut buf = ReplayBuffer::new(env.n_tasks(), 0.97);
    for (task, eps) in transition_pool(&env, 3).into_iter().enumerate() {
        buf.add_demo_episode(&eps[..eps.len() / 2]).map_err(|e| e.to_string())?;
        for k in 0..(task + 1) {
            let mut scene = Scene::reset(&env, task, 500 + k as u64).unwrap();
            let ep = rollout(&mut scene, &mut ExpertPolicy::noisy(&env, 900 + k as u64), None).unwrap();
            for t in ep.transitions {
                buf.append_rollout(t).map_err(|e| e.to_string())?;
            }
        }
    }
    let n = env.n_tasks();
    let batch = 96;
    let batches = 10_000;
    let mut per_task = vec![0usize; n];
    let mut demos = 0usize;
    let mut total = 0usize;
    let mut rng = SimRng::seed_from(8);
    for _ in 0..batches {
        for (task, part) in buf.sample_online(batch, &mut rng).map_err(|e| e.to_string())?.iter().enumerate() {
            for s in part {
                if s.transition.task_id != task {
                    return Err(format!("sample of task {} in slot {task}", s.transition.task_id));
                }
                per_task[task] += 1;
                demos += usize::from(s.provenance == Provenance::Demo);
                total += 1;
            }
        }
    }
    let task_share: Vec<f64> = per_task.iter().map(|&c| c as f64 / total as f64).collect();
    let demo_share = demos as f64 / total as f64;
    let worst = task_share
        .iter()
        .map(|s| (s - 1.0 / n as f64).abs())
        .fold((demo_share - 0.5).abs(), f64::max);
    check(
        total == batches * batch && worst <= 0.01,
        format!("{batches} batches of {batch}: task shares {task_share:.4?}, demo share {demo_share:.4}, max deviation {worst:.2e}"),
    )
}

// --------------------------------------------------------------- null case

fn regularization_null_case() -> Outcome {
    let env = EnvConfig::default();
    let n_tasks = env.n_tasks();
    let mut actor = DualActor::new(n_tasks, &ActorConfig::default(), 9).map_err(|e| e.to_string())?;
    actor.refiner.net.params.values.iter_mut().for_each(|v| *v = 0.0);
    let critics: Vec<TaskCritic> = (0..n_tasks)
        .map(|i| TaskCritic::new(feature_dim(n_tasks), &[64, 64], 40 + i as u64).unwrap())
        .collect();
    let mut rng = SimRng::seed_from(4);
    let pool: Vec<Transition> = transition_pool(&env, 2).into_iter().flatten().collect();
    let records: Vec<TalkTweakRecord> = draw(&pool, 64, &mut rng)
        .into_iter()
        .map(|t| TalkTweakRecord {
            obs: t.obs,
            action: t.action,
            command: random_command(&mut rng),
        })
        .collect();
    let cfg = RefinementLossConfig { eta_bc: 1.0, eta_q: 0.1, eta_reg: 0.1 };
    let loss = refinement_loss(&actor, &critics, &records, &cfg, &mut rng).map_err(|e| e.to_string())?;
    if loss.reg != 0.0 {
        return Err(format!("regularisation term {:e} with zero mean", loss.reg));
    }
    let mut compared = 0;
    for (i, t) in pool.iter().enumerate() {
        let h = actor.embed(&t.obs).map_err(|e| e.to_string())?;
        let f = actor.features(&t.obs);
        let cmd = random_command(&mut rng);
        let p = actor.sample_primary(&h, &mut SimRng::seed_from(i as u64)).map_err(|e| e.to_string())?;
        let r = actor
            .sample_refined(&h, &f, &cmd, &mut SimRng::seed_from(i as u64))
            .map_err(|e| e.to_string())?;
        if p.to_array().map(f64::to_bits) != r.to_array().map(f64::to_bits) {
            return Err(format!("state {i}: refined {r:?} differs from primary {p:?}"));
        }
        compared += 1;
    }
    Ok(format!("regularisation term exactly 0 on {} records; {compared} bit-identical action pairs", records.len()))
}

// ------------------------------------------------------------- KV pooling

fn kv_pooling() -> Outcome {
    let mut rng = SimRng::seed_from(31);
    let mut worst = 0.0f64;
    let cases = 1000;
    for case in 0..cases {
        let (t, h, d) = (1 + rng.below(16), 1 + rng.below(4), 1 + rng.below(8));
        let k: Vec<f64> = rng.standard_normal_vec(t * h * d);
        let v: Vec<f64> = rng.standard_normal_vec(t * h * d);
        let mut mask: Vec<u8> = (0..t).map(|_| rng.below(2) as u8).collect();
        mask[rng.below(t)] = 1;
        let got = pooled_prefix_embedding(
            &KvTensor::new(t, h, d, k.clone()).unwrap(),
            &KvTensor::new(t, h, d, v.clone()).unwrap(),
            &mask,
        )
        .map_err(|e| e.to_string())?;
        let kept: Vec<usize> = (0..t).filter(|&i| mask[i] == 1).collect();
        let mut want = Vec::with_capacity(2 * h * d);
        for src in [&k, &v] {
            for hi in 0..h {
                for di in 0..d {
                    let s: f64 = kept.iter().map(|&ti| src[(ti * h + hi) * d + di]).sum();
                    want.push(s / kept.len() as f64);
                }
            }
        }
        if got.len() != want.len() {
            return Err(format!("case {case}: length {} vs {}", got.len(), want.len()));
        }
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    check(worst <= 1e-12, format!("{cases} tensors, worst error {worst:.1e}"))
}

// ------------------------------------------------------------- end to end

struct Trained {
    warm: Learner,
    demos: ReplayBuffer,
    dual: OnlineReport,
}

fn warm_start(cfg: &TrainConfig) -> dual_actor_rl::Result<(Learner, ReplayBuffer, f64)> {
    let t = Instant::now();
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut l = Learner::new(cfg.clone())?;
    warmup_phase(&mut l, &buf, cfg.warmup_steps, &mut MetricsLog::discard())?;
    Ok((l, buf, t.elapsed().as_secs_f64()))
}

fn end_to_end(trained: &mut Option<Trained>) -> Outcome {
    let cfg = TrainConfig::default();
    let (warm, demos, warm_s) = warm_start(&cfg).map_err(|e| e.to_string())?;
    let mut dual_learner = warm.clone();
    let (dual, _) = online_phase(
        &mut dual_learner,
        demos.clone(),
        OnlineMode::Deterministic { actors: 1 },
        StopRule::AllTasks,
        &mut MetricsLog::discard(),
    )
    .map_err(|e| e.to_string())?;
    let total_s = warm_s + dual.wall_s;

    // The single-actor arm gets the same interaction budget.
    let mut single_learner = warm.clone();
    single_learner.cfg.disable_dual_actor = true;
    single_learner.cfg.max_env_steps = dual.env_steps as usize;
    let (single, _) = online_phase(
        &mut single_learner,
        demos.clone(),
        OnlineMode::Deterministic { actors: 1 },
        StopRule::Never,
        &mut MetricsLog::discard(),
    )
    .map_err(|e| e.to_string())?;

    let eval_seed = 2_025;
    let dual_eval = evaluate(&dual.snapshot, &cfg.env, 25, true, CommandSource::Oracle, eval_seed).map_err(|e| e.to_string())?;
    let single_eval =
        evaluate(&single.snapshot, &cfg.env, 25, false, CommandSource::Oracle, eval_seed).map_err(|e| e.to_string())?;

    let reached = dual.reached_all.clone();
    let detail = format!(
        "reached {} at {} env steps, {:.0}s total (warm-up {:.0}s), intervention fraction {:.3}; \
         dual arm with commands {:.3?} (mean {:.3}) vs single-actor arm {:.3?} (mean {:.3})",
        reached.as_ref().map_or("no".into(), |p| format!("{:.2?}", p.success)),
        reached.as_ref().map_or(dual.env_steps, |p| p.env_steps),
        total_s,
        warm_s,
        dual.intervention_fraction,
        dual_eval.success_rates(),
        dual_eval.mean_success(),
        single_eval.success_rates(),
        single_eval.mean_success(),
    );
    let ok = reached.as_ref().is_some_and(|p| p.env_steps <= 60_000)
        && total_s <= 1800.0
        && dual_eval.mean_success() >= single_eval.mean_success();
    *trained = Some(Trained { warm, demos, dual });
    check(ok, detail)
}

fn long_horizon_trend(trained: &Option<Trained>) -> Outcome {
    let t = trained.as_ref().ok_or("needs the end-to-end run")?;
    let env = EnvConfig::default();
    let seeds: Vec<u64> = (0..10).collect();
    let rep = long_horizon(&t.dual.snapshot, &env, 4, &seeds).map_err(|e| e.to_string())?;
    let rates = rep.rates();
    check(
        rep.non_increasing() && rep.rate(1).unwrap_or(0.0) >= 0.7,
        format!("chain success for 1..=4 bolts over {} seeds: {rates:.2?}", seeds.len()),
    )
}

fn lockstep_equivalence() -> Outcome {
    let cfg = TrainConfig {
        demos_per_task: 2,
        warmup_steps: 5,
        max_env_steps: 1_500,
        eval_every: 1_000_000,
        ..Default::default()
    };
    let (l, buf, _) = warm_start(&cfg).map_err(|e| e.to_string())?;
    let (mut a, mut b) = (l.clone(), l);
    let (rep_a, out_a) = online_phase(
        &mut a,
        buf.clone(),
        OnlineMode::Deterministic { actors: 1 },
        StopRule::Never,
        &mut MetricsLog::discard(),
    )
    .map_err(|e| e.to_string())?;
    let (rep_b, out_b, _) = train_networked(&mut b, buf, 1, Schedule::Lockstep, None, StopRule::Never, &mut MetricsLog::discard())
        .map_err(|e| e.to_string())?;
    let bytes = |buf: &ReplayBuffer| -> Vec<(String, Vec<u8>)> {
        let dir = tempfile::tempdir().unwrap();
        buf.save(dir.path()).unwrap();
        let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect()
    };
    let (ba, bb) = (bytes(&out_a), bytes(&out_b));
    let size: usize = ba.iter().map(|(_, b)| b.len()).sum();
    check(
        rep_a.online_updates > 0 && ba == bb && rep_a.snapshot == rep_b.snapshot,
        format!(
            "{} env steps, {} updates; {} buffer files ({size} bytes) identical: {}",
            rep_a.env_steps,
            rep_a.online_updates,
            ba.len(),
            ba == bb
        ),
    )
}

/// Per-step actor pacing for the scaling runs. On a single core the learner
/// shares the CPU with the actors, so the pace must exceed the per-update
/// cost for a second actor to add throughput.
const SCALING_PACE: Duration = Duration::from_millis(15);

fn scaling(trained: &Option<Trained>) -> Outcome {
    let (warm, demos) = match trained {
        Some(t) => (t.warm.clone(), t.demos.clone()),
        None => {
            let (l, b, _) = warm_start(&TrainConfig::default()).map_err(|e| e.to_string())?;
            (l, b)
        }
    };
    let seeds: Vec<u64> = (0..10).collect();
    let rep = scaling_benchmark(&warm, &demos, &[1, 2], &seeds, SCALING_PACE, 200).map_err(|e| e.to_string())?;
    let speedup = rep.speedup(1, 2);
    let steps = (rep.median_steps(1), rep.median_steps(2));
    check(
        speedup.is_some_and(|s| s >= 1.3),
        format!(
            "median wall to 90% mean: 1 actor {:.1?}s, 2 actors {:.1?}s, speedup {:.2?}; median steps {:?}; reached {}/{} and {}/{}",
            rep.median_wall(1),
            rep.median_wall(2),
            speedup,
            steps,
            rep.reached(1),
            seeds.len(),
            rep.reached(2),
            seeds.len()
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite {
        filters,
        failed: 0,
        ran: 0,
    };
    suite.run("gradients", gradient_suite);
    suite.run("talk_tweak_oracle", talk_tweak_oracle);
    suite.run("epsilon_weighting", epsilon_weighting);
    suite.run("sampling_ratios", sampling_ratios);
    suite.run("regularization_null_case", regularization_null_case);
    suite.run("kv_pooling", kv_pooling);
    let mut trained = None;
    let needs_training = ["end_to_end", "long_horizon", "scaling"].iter().any(|n| suite.wants(n));
    if needs_training {
        suite.run("end_to_end", || end_to_end(&mut trained));
    }
    suite.run("long_horizon", || long_horizon_trend(&trained));
    suite.run("lockstep_equivalence", lockstep_equivalence);
    suite.run("scaling", || scaling(&trained));
    println!("acceptance: {} run, {} failed", suite.ran, suite.failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && suite.failed > 0 {
        std::process::exit(1);
    }
}
