//! Fills a replay buffer from a short run and dumps it as JSON lines.
//!
//! `cargo run --release --example replay_dump -- [out.jsonl]`; at most five
//! entries per store are written.

use dual_actor_rl::cli::dump_replay;
use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{collect_demos, online_phase, Learner, MetricsLog, OnlineMode, StopRule, TrainConfig};

fn main() -> dual_actor_rl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "replay.jsonl".into());
    let cfg = TrainConfig {
        demos_per_task: 2,
        max_env_steps: 400,
        eval_every: 1_000_000,
        ..Default::default()
    };
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(&cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut learner = Learner::new(cfg)?;
    let (_, buf) = online_phase(
        &mut learner,
        buf,
        OnlineMode::Deterministic { actors: 1 },
        StopRule::Never,
        &mut MetricsLog::discard(),
    )?;
    for (task, store, n) in dump_replay(&buf, out.as_ref(), Some(5))? {
        println!("task {task} {store:<9} {n} entries");
    }
    println!("wrote {out}");
    Ok(())
}
