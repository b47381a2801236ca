//! Serves the operator control page and runs policy episodes that a person
//! can watch, take over with the keyboard, and steer with typed commands.
//!
//! `cargo run --release --example operator_ui -- [addr] [episodes]`, then
//! open `http://<addr>/` in a browser.

use std::time::Duration;

use dual_actor_rl::talk_tweak::annotate;
use dual_actor_rl::trainer::{run_supervised_episode, Learner, TrainConfig};
use dual_actor_rl::ui::{UiConfig, UiServer};

fn main() -> dual_actor_rl::Result<()> {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8765".into());
    let episodes: u64 = args.next().map_or(3, |s| s.parse().expect("episode count"));
    let server = UiServer::start(UiConfig {
        addr,
        ..Default::default()
    })?;
    let ui = server.handle();
    println!("control page at http://{}/", server.local_addr());
    println!("waiting for an operator to connect");
    while !ui.wait_for_session(Duration::from_secs(60)) {}

    let cfg = TrainConfig::default();
    let snapshot = Learner::new(cfg.clone())?.snapshot();
    for index in 0..episodes {
        let mut sup = ui.supervisor();
        let batch = run_supervised_episode(&cfg, &cfg.env, &snapshot, 0, index, None, Some(&mut sup))?;
        let records = annotate(&batch.transitions, &cfg.talk);
        println!(
            "episode {index}: {} steps, {} intervened, success {}, {} talk-and-tweak records",
            batch.transitions.len(),
            batch.result.interventions,
            batch.result.success,
            records.len()
        );
    }
    Ok(())
}
