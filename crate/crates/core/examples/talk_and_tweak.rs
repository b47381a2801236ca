//! Turns an operator correction into refinement commands: a rollout where
//! the expert takes over for a stretch, annotated with the window rule.

use dual_actor_rl::domain::{render_command, Action};
use dual_actor_rl::env::{rollout, EnvConfig, Policy, Scene};
use dual_actor_rl::domain::Observation;
use dual_actor_rl::talk_tweak::{annotate, summarize, TalkTweakConfig};

/// Drifts right and up for eight steps starting at step 3, idles otherwise.
struct Jog;

impl Policy for Jog {
    fn act(&mut self, obs: &Observation) -> dual_actor_rl::Result<Action> {
        let mut a = Action::from_array(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        if (3..11).contains(&obs.step_index) {
            a.dpos = [0.008, 0.0, 0.004];
        }
        Ok(a)
    }
}

fn main() -> dual_actor_rl::Result<()> {
    let env = EnvConfig::default();
    let mut scene = Scene::reset(&env, 1, 4)?;
    let mut ep = rollout(&mut scene, &mut Jog, None)?;
    for t in ep.transitions.iter_mut().filter(|t| (3..11).contains(&t.obs.step_index)) {
        t.intervened = true;
    }
    let cfg = TalkTweakConfig::default();
    let records = annotate(&ep.transitions, &cfg);
    for r in &records {
        println!("step {:>2}: \"{}\"", r.obs.step_index, render_command(&r.command));
    }
    print!("{}", summarize(&records).to_text());
    Ok(())
}
