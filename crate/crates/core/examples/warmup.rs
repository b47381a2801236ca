//! Offline warm-up on demonstrations, then a checkpoint round trip and an
//! evaluation table.
//!
//! `cargo run --release --example warmup -- [steps]`

use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{
    collect_demos, evaluate, load_checkpoint, save_checkpoint, warmup_phase, CommandSource, Learner, MetricsLog,
    TrainConfig,
};

fn main() -> dual_actor_rl::Result<()> {
    let steps = std::env::args().nth(1).map_or(500, |s| s.parse().expect("step count"));
    let cfg = TrainConfig::default();
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(&cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut learner = Learner::new(cfg.clone())?;
    let before = evaluate(&learner.snapshot(), &cfg.env, 10, false, CommandSource::Oracle, 1)?;
    let snap = warmup_phase(&mut learner, &buf, steps, &mut MetricsLog::discard())?;
    let after = evaluate(&snap, &cfg.env, 10, false, CommandSource::Oracle, 1)?;
    println!("before warm-up:\n{}", before.to_table());
    println!("after {steps} warm-up steps:\n{}", after.to_table());

    let dir = std::env::temp_dir().join("dual-actor-warmup-example");
    save_checkpoint(&dir, &learner, &buf)?;
    let (restored, _) = load_checkpoint(&dir, cfg)?;
    println!("checkpoint in {} restores version {}", dir.display(), restored.snapshot().version);
    Ok(())
}
