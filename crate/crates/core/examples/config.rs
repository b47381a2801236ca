//! Configuration layering: defaults, an optional file, `DUAL_ACTOR_*`
//! variables, then explicit overrides.
//!
//! `DUAL_ACTOR_GAMMA=0.95 cargo run --example config -- [file.cfg]`

use dual_actor_rl::config::{apply, load, render};

fn main() -> dual_actor_rl::Result<()> {
    let path = std::env::args().nth(1);
    let cfg = load(path.as_deref().map(std::path::Path::new))?;
    let cfg = apply(&cfg, [("eval_trials", "10"), ("seed", "7")])?;
    print!("{}", render(&cfg));
    match apply(&cfg, [("no_such_key", "1")]) {
        Ok(_) => println!("unexpectedly accepted an unknown key"),
        Err(e) => println!("unknown keys are refused: {e}"),
    }
    Ok(())
}
