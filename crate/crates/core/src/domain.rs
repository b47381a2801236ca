//! Value types shared by every module: actions, observations,
//! transitions, refinement commands and talk-and-tweak records.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 7;
/// Per-step translation bound (m) on each axis.
pub const MAX_DPOS: f64 = 0.01;
/// Per-step rotation bound (rad) on each axis.
pub const MAX_DROT: f64 = 0.05;
pub const GRIP_THRESHOLD: f64 = 0.5;
pub const COMMAND_DIM: usize = 4;

pub type TaskId = usize;

/// 7-d end-effector delta pose plus gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dpos: [f64; 3],
    pub drot: [f64; 3],
    pub grip: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        dpos: [0.0; 3],
        drot: [0.0; 3],
        grip: 0.0,
    };

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let [x, y, z] = self.dpos;
        let [r, p, w] = self.drot;
        [x, y, z, r, p, w, self.grip]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            dpos: [a[0], a[1], a[2]],
            drot: [a[3], a[4], a[5]],
            grip: a[6],
        }
    }

    /// Map into the unit box used by every network: translation and rotation
    /// divided by their per-step bounds, gripper mapped from [0, 1] to [-1, 1].
    pub fn normalized(&self) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for d in 0..3 {
            out[d] = self.dpos[d] / MAX_DPOS;
            out[3 + d] = self.drot[d] / MAX_DROT;
        }
        out[6] = 2.0 * self.grip - 1.0;
        out
    }

    pub fn from_normalized(n: &[f64]) -> Self {
        Self {
            dpos: [n[0] * MAX_DPOS, n[1] * MAX_DPOS, n[2] * MAX_DPOS],
            drot: [n[3] * MAX_DROT, n[4] * MAX_DROT, n[5] * MAX_DROT],
            grip: 0.5 * (n[6] + 1.0),
        }
    }

    /// Clamp every component to its per-step bound; gripper into [0, 1].
    pub fn clamped(&self) -> Self {
        let c = |v: f64, m: f64| v.clamp(-m, m);
        Self {
            dpos: self.dpos.map(|v| c(v, MAX_DPOS)),
            drot: self.drot.map(|v| c(v, MAX_DROT)),
            grip: self.grip.clamp(0.0, 1.0),
        }
    }

    pub fn gripper_closed(&self) -> bool {
        self.grip >= GRIP_THRESHOLD
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn within_bounds(&self) -> bool {
        self.dpos.iter().all(|v| v.abs() <= MAX_DPOS + 1e-15)
            && self.drot.iter().all(|v| v.abs() <= MAX_DROT + 1e-15)
            && (0.0..=1.0).contains(&self.grip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GripState {
    Open,
    Closed,
}

/// Full simulator observation. Poses are `[x, y, z, roll, pitch, yaw]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ee_pos: [f64; 3],
    pub ee_rpy: [f64; 3],
    pub grip_state: GripState,
    pub object_pose: [f64; 6],
    pub goal_pose: [f64; 6],
    pub attached: bool,
    pub step_index: u32,
    pub task_id: TaskId,
}

impl Observation {
    pub fn object_pos(&self) -> [f64; 3] {
        [self.object_pose[0], self.object_pose[1], self.object_pose[2]]
    }

    pub fn object_rpy(&self) -> [f64; 3] {
        [self.object_pose[3], self.object_pose[4], self.object_pose[5]]
    }

    pub fn goal_pos(&self) -> [f64; 3] {
        [self.goal_pose[0], self.goal_pose[1], self.goal_pose[2]]
    }

    pub fn goal_rpy(&self) -> [f64; 3] {
        [self.goal_pose[3], self.goal_pose[4], self.goal_pose[5]]
    }
}

/// Wrap an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Ternary translational refinement command, or the `[null]` placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RefinementCommand {
    pub axes: [i8; 3],
    pub is_null: bool,
}

pub const NULL_TOKEN: &str = "[null]";

const AXIS_WORDS: [(&str, &str); 3] = [("right", "left"), ("forward", "backward"), ("up", "down")];

impl RefinementCommand {
    pub const NULL: RefinementCommand = RefinementCommand {
        axes: [0, 0, 0],
        is_null: true,
    };

    pub fn new(axes: [i8; 3]) -> Result<Self> {
        if axes.iter().any(|a| !(-1..=1).contains(a)) {
            return Err(Error::InvalidArgument(format!("axis values must be -1, 0 or +1: {axes:?}")));
        }
        Ok(Self { axes, is_null: false })
    }

    pub fn is_all_zero(&self) -> bool {
        self.axes == [0, 0, 0]
    }

    /// All 27 ternary commands followed by `[null]`.
    pub fn vocabulary() -> Vec<RefinementCommand> {
        let mut out = Vec::with_capacity(28);
        for x in -1..=1 {
            for y in -1..=1 {
                for z in -1..=1 {
                    out.push(RefinementCommand {
                        axes: [x, y, z],
                        is_null: false,
                    });
                }
            }
        }
        out.push(Self::NULL);
        out
    }
}

impl fmt::Display for RefinementCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_command(self))
    }
}

/// `"move " + axis words joined by " and "` in x, y, z order; null and
/// all-zero commands render as `[null]`.
pub fn render_command(cmd: &RefinementCommand) -> String {
    if cmd.is_null || cmd.is_all_zero() {
        return NULL_TOKEN.to_string();
    }
    let words: Vec<&str> = cmd
        .axes
        .iter()
        .zip(AXIS_WORDS)
        .filter_map(|(&a, (pos, neg))| match a {
            1 => Some(pos),
            -1 => Some(neg),
            _ => None,
        })
        .collect();
    format!("move {}", words.join(" and "))
}

pub fn parse_command(text: &str) -> Result<RefinementCommand> {
    let vocab_err = || {
        Error::Parse(format!(
            "unrecognized refinement command {text:?}; expected \"[null]\" or \"move <dirs>\" \
             with dirs from right/left, forward/backward, up/down joined by \" and \" in x, y, z order"
        ))
    };
    let trimmed = text.trim();
    if trimmed == NULL_TOKEN {
        return Ok(RefinementCommand::NULL);
    }
    let rest = trimmed.strip_prefix("move ").ok_or_else(vocab_err)?;
    let mut axes = [0i8; 3];
    let mut last_axis: Option<usize> = None;
    for word in rest.split(" and ") {
        let (axis, sign) = AXIS_WORDS
            .iter()
            .enumerate()
            .find_map(|(i, (pos, neg))| {
                if word == *pos {
                    Some((i, 1))
                } else if word == *neg {
                    Some((i, -1))
                } else {
                    None
                }
            })
            .ok_or_else(vocab_err)?;
        if last_axis.is_some_and(|l| l >= axis) {
            return Err(vocab_err());
        }
        axes[axis] = sign;
        last_axis = Some(axis);
    }
    Ok(RefinementCommand { axes, is_null: false })
}

/// Fixed-width network encoding `(t_x, t_y, t_z, is_null)`.
pub fn encode_command(cmd: &RefinementCommand) -> [f64; COMMAND_DIM] {
    [
        cmd.axes[0] as f64,
        cmd.axes[1] as f64,
        cmd.axes[2] as f64,
        if cmd.is_null { 1.0 } else { 0.0 },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub intervened: bool,
    pub task_id: TaskId,
}

/// `(state, intervened action, refinement command)` triplet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TalkTweakRecord {
    pub obs: Observation,
    pub action: Action,
    pub command: RefinementCommand,
}

/// Task template: where objects and goals are drawn from and how close is
/// close enough.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub object_template: [f64; 6],
    pub goal_template: [f64; 6],
    /// Grasp point relative to the object position.
    pub grasp_offset: [f64; 3],
    /// Half-width of the uniform x–y randomization applied to object and goal.
    pub xy_range: f64,
    pub success_tolerance_pos: f64,
    pub success_tolerance_rot: f64,
}

/// The three bolt-handling analogues: place upright, pick, assemble.
pub fn default_tasks() -> Vec<TaskSpec> {
    let base = |id, name: &str, object: [f64; 6], goal: [f64; 6]| TaskSpec {
        id,
        name: name.to_string(),
        object_template: object,
        goal_template: goal,
        grasp_offset: [0.0, 0.0, 0.02],
        xy_range: 0.05,
        success_tolerance_pos: 0.002,
        success_tolerance_rot: 0.05,
    };
    vec![
        base(
            0,
            "place the bolt upright",
            [-0.03, 0.0, 0.0, 0.3, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ),
        base(
            1,
            "pick up the bolt",
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.06, 0.0, 0.0, 0.0],
        ),
        base(
            2,
            "assemble the bolt",
            [0.0, 0.0, 0.06, 0.0, 0.0, 0.0],
            [0.05, 0.03, 0.0, 0.0, 0.0, 0.0],
        ),
    ]
}
