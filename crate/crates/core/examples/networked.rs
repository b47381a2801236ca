//! Learner service with actor clients over loopback TCP. The lockstep
//! schedule reproduces in-process training exactly; the concurrent one
//! runs actors freely.
//!
//! `cargo run --release --example networked -- [actors] [env_steps]`

use dual_actor_rl::net::{train_networked, Schedule};
use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{
    collect_demos, online_phase, warmup_phase, Learner, MetricsLog, OnlineMode, StopRule, TrainConfig,
};

fn main() -> dual_actor_rl::Result<()> {
    let mut args = std::env::args().skip(1);
    let actors: u32 = args.next().map_or(2, |s| s.parse().expect("actor count"));
    let budget: usize = args.next().map_or(3_000, |s| s.parse().expect("step budget"));
    let cfg = TrainConfig {
        demos_per_task: 4,
        warmup_steps: 50,
        max_env_steps: budget,
        eval_every: 1_000_000,
        ..Default::default()
    };
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(&cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut warm = Learner::new(cfg.clone())?;
    warmup_phase(&mut warm, &buf, cfg.warmup_steps, &mut MetricsLog::discard())?;

    let mut local = warm.clone();
    let (_, local_buf) = online_phase(
        &mut local,
        buf.clone(),
        OnlineMode::Deterministic { actors: 1 },
        StopRule::Never,
        &mut MetricsLog::discard(),
    )?;
    let mut remote = warm.clone();
    let (rep, remote_buf, _) = train_networked(
        &mut remote,
        buf.clone(),
        1,
        Schedule::Lockstep,
        None,
        StopRule::Never,
        &mut MetricsLog::discard(),
    )?;
    println!(
        "lockstep, 1 actor: {} steps, {} updates, identical to in-process: {}",
        rep.env_steps,
        rep.online_updates,
        local_buf == remote_buf && rep.snapshot == local.snapshot()
    );

    let mut free = warm;
    let (rep, _, reports) = train_networked(
        &mut free,
        buf,
        actors,
        Schedule::Concurrent { max_lag: 200 },
        None,
        StopRule::Never,
        &mut MetricsLog::discard(),
    )?;
    println!("concurrent, {actors} actors: {} steps in {:.2}s", rep.env_steps, rep.wall_s);
    for (i, a) in reports.iter().enumerate() {
        println!("  actor {i}: {} episodes, {} steps, {} uploads acked", a.episodes, a.env_steps, a.acked);
    }
    Ok(())
}
