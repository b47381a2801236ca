//! Chained multi-bolt episodes: the object pose carries over between
//! sub-tasks, so errors compound with chain length.
//!
//! `cargo run --release --example long_horizon -- [warmup_steps]`

use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{collect_demos, long_horizon, warmup_phase, Learner, MetricsLog, TrainConfig};

fn main() -> dual_actor_rl::Result<()> {
    let steps = std::env::args().nth(1).map_or(1_000, |s| s.parse().expect("warm-up steps"));
    let cfg = TrainConfig::default();
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(&cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut learner = Learner::new(cfg.clone())?;
    let snap = warmup_phase(&mut learner, &buf, steps, &mut MetricsLog::discard())?;
    let seeds: Vec<u64> = (0..10).collect();
    let rep = long_horizon(&snap, &cfg.env, 4, &seeds)?;
    print!("{}", rep.to_table());
    println!("non-increasing in chain length: {}", rep.non_increasing());
    Ok(())
}
