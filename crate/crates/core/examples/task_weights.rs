//! Adaptive task weights: weaker tasks (lower mean Q) get more weight,
//! clipped to the configured band.
//!
//! `cargo run --example task_weights -- 0.9 0.1 0.5`

use dual_actor_rl::critics::{raw_task_weight, task_weights, TaskWeightConfig};

fn main() -> dual_actor_rl::Result<()> {
    let mut q: Vec<f64> = std::env::args().skip(1).map(|s| s.parse().expect("mean Q value")).collect();
    if q.is_empty() {
        q = vec![0.9, 0.1, 0.5];
    }
    let cfg = TaskWeightConfig::default();
    let w = task_weights(&q, &cfg)?;
    println!("c = {}, band [{}, {}]", cfg.c, cfg.eps_min, cfg.eps_max);
    for (i, (qi, wi)) in q.iter().zip(&w).enumerate() {
        println!("task {i}: mean Q {qi:.3}  raw {:.4}  weight {wi:.4}", raw_task_weight(&q, i, cfg.c));
    }
    Ok(())
}
