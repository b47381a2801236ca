//! Wall-clock time to the success target with one and two paced actors.
//!
//! `cargo run --release --example scaling -- [seeds] [pace_ms]`

use std::time::Duration;

use dual_actor_rl::net::scaling_benchmark;
use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{collect_demos, warmup_phase, Learner, MetricsLog, TrainConfig};

fn main() -> dual_actor_rl::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().map_or(1, |s| s.parse().expect("seed count"));
    let pace = Duration::from_millis(args.next().map_or(15, |s| s.parse().expect("pace in ms")));
    let cfg = TrainConfig::default();
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(&cfg)? {
        buf.add_demo_episode(&ep)?;
    }
    let mut learner = Learner::new(cfg.clone())?;
    warmup_phase(&mut learner, &buf, cfg.warmup_steps, &mut MetricsLog::discard())?;
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let rep = scaling_benchmark(&learner, &buf, &[1, 2], &seeds, pace, 200)?;
    print!("{}", rep.to_table());
    Ok(())
}
