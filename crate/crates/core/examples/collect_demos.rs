//! Collects scripted noisy-expert demonstrations and writes them as a
//! dataset file.
//!
//! `cargo run --example collect_demos -- [demos_per_task] [out.httd]`

use dual_actor_rl::codec::{read_dataset, write_dataset, Record};
use dual_actor_rl::trainer::{collect_demos, TrainConfig};

fn main() -> dual_actor_rl::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_task = args.next().map_or(5, |s| s.parse().expect("demos per task"));
    let out = args.next().unwrap_or_else(|| "demos.httd".into());
    let cfg = TrainConfig {
        demos_per_task: per_task,
        ..Default::default()
    };
    let demos = collect_demos(&cfg)?;
    for (task, eps) in demos.chunks(per_task).enumerate() {
        let steps: usize = eps.iter().map(Vec::len).sum();
        println!("task {task}: {} episodes, {steps} transitions", eps.len());
    }
    let records: Vec<Record> = demos.iter().flatten().copied().map(Record::Transition).collect();
    write_dataset(&out, &records)?;
    println!("wrote {} records to {out} ({} read back)", records.len(), read_dataset(&out)?.len());
    Ok(())
}
