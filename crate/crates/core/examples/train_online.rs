//! Warm-up followed by online interaction with the intervention oracle, in
//! the single-threaded reproducible mode.
//!
//! `cargo run --release --example train_online -- [env_steps]`

use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{
    collect_demos, evaluate, online_phase, warmup_phase, CommandSource, Learner, MetricsLog, OnlineMode, StopRule,
    TrainConfig,
};

fn main() -> dual_actor_rl::Result<()> {
    let budget = std::env::args().nth(1).map_or(6_000, |s| s.parse().expect("step budget"));
    let cfg = TrainConfig {
        max_env_steps: budget,
        eval_every: 2_000,
        ..Default::default()
    };
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(&cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut learner = Learner::new(cfg.clone())?;
    warmup_phase(&mut learner, &buf, cfg.warmup_steps, &mut MetricsLog::discard())?;
    let (rep, buf) = online_phase(
        &mut learner,
        buf,
        OnlineMode::Deterministic { actors: 1 },
        StopRule::AllTasks,
        &mut MetricsLog::discard(),
    )?;
    for e in &rep.evals {
        println!("{:>6} steps {:>6.0}s success {:.2?}", e.env_steps, e.wall_s, e.success);
    }
    println!(
        "{} episodes, {} updates, intervention fraction {:.3}, {} talk-and-tweak records",
        rep.episodes,
        rep.online_updates,
        rep.intervention_fraction,
        buf.talk_tweak().len()
    );
    let primary = evaluate(&rep.snapshot, &cfg.env, 25, false, CommandSource::Oracle, 9)?;
    let refined = evaluate(&rep.snapshot, &cfg.env, 25, true, CommandSource::Oracle, 9)?;
    println!("primary mode:\n{}refined with oracle commands:\n{}", primary.to_table(), refined.to_table());
    Ok(())
}
