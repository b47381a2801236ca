//! Rule-based conversion of intervened action sequences into refinement
//! commands.
//!
//! For every intervened step `t` whose forward window `[t, t + J)` is fully
//! intervened, the translational components of the window's actions are
//! summed; each axis yields `+1` above `σ`, `-1` below `-σ` and nothing
//! inside `[-σ, σ]`. Windows slide with stride 1. Windows whose three axes
//! are all silent produce no record: the `[null]` command is reserved for
//! the refinement actor's regularisation input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{render_command, Action, Observation, RefinementCommand, TalkTweakRecord, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TalkTweakConfig {
    /// Window length `J`.
    pub window: usize,
    /// Per-axis displacement threshold `σ` (m).
    pub sigma: f64,
}

impl Default for TalkTweakConfig {
    fn default() -> Self {
        Self { window: 5, sigma: 0.001 }
    }
}

/// `J` consecutive intervened actions and the observation at the window start.
#[derive(Debug, Clone)]
pub struct InterventionWindow<'a> {
    pub actions: &'a [Action],
    pub start_obs: Observation,
}

pub fn cumulative_displacement(window: &InterventionWindow<'_>, j: usize) -> Result<[f64; 3]> {
    if window.actions.len() < j {
        return Err(Error::InvalidArgument(format!(
            "window holds {} actions, need {j}",
            window.actions.len()
        )));
    }
    let mut delta = [0.0; 3];
    for a in &window.actions[..j] {
        for d in 0..3 {
            delta[d] += a.dpos[d];
        }
    }
    Ok(delta)
}

/// Ternary command for one axis; `|delta| == sigma` is silent.
pub fn axis_command(delta: f64, sigma: f64) -> i8 {
    if delta > sigma {
        1
    } else if delta < -sigma {
        -1
    } else {
        0
    }
}

pub fn window_command(delta: [f64; 3], sigma: f64) -> RefinementCommand {
    RefinementCommand {
        axes: delta.map(|d| axis_command(d, sigma)),
        is_null: false,
    }
}

pub fn annotate(trajectory: &[Transition], cfg: &TalkTweakConfig) -> Vec<TalkTweakRecord> {
    let j = cfg.window;
    if j == 0 || trajectory.len() < j {
        return Vec::new();
    }
    let actions: Vec<Action> = trajectory.iter().map(|t| t.action).collect();
    // run[t] = number of consecutive intervened steps starting at t.
    let mut run = vec![0usize; trajectory.len() + 1];
    for t in (0..trajectory.len()).rev() {
        run[t] = if trajectory[t].intervened { run[t + 1] + 1 } else { 0 };
    }
    let mut out = Vec::new();
    for t in 0..=trajectory.len() - j {
        if run[t] < j {
            continue;
        }
        let window = InterventionWindow {
            actions: &actions[t..t + j],
            start_obs: trajectory[t].obs,
        };
        let delta = cumulative_displacement(&window, j).expect("window is full");
        let command = window_command(delta, cfg.sigma);
        if command.is_all_zero() {
            continue;
        }
        out.push(TalkTweakRecord {
            obs: window.start_obs,
            action: trajectory[t].action,
            command,
        });
    }
    out
}

/// Records per rendered command and per task, for export summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub total: usize,
    pub per_command: BTreeMap<String, usize>,
    pub per_task: BTreeMap<usize, usize>,
}

pub fn summarize(records: &[TalkTweakRecord]) -> AnnotationSummary {
    let mut s = AnnotationSummary {
        total: records.len(),
        ..Default::default()
    };
    for r in records {
        *s.per_command.entry(render_command(&r.command)).or_default() += 1;
        *s.per_task.entry(r.obs.task_id).or_default() += 1;
    }
    s
}

impl AnnotationSummary {
    pub fn to_text(&self) -> String {
        let mut out = format!("records: {}\n", self.total);
        out.push_str("per command:\n");
        for (cmd, n) in &self.per_command {
            out.push_str(&format!("  {cmd}: {n}\n"));
        }
        out.push_str("per task:\n");
        for (task, n) in &self.per_task {
            out.push_str(&format!("  {task}: {n}\n"));
        }
        out
    }
}
