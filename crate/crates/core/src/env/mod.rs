//! Deterministic kinematic manipulation simulator.
//!
//! One object, one goal, a free-floating end-effector with a binary gripper.
//! Rewards are sparse: 1 on the successful terminal transition, 0 otherwise.

mod expert;
mod sim;
mod task;

pub use expert::{corrupt_expert, default_failure_modes, scripted_expert, FailureMode};
pub use sim::{observe, reset, step, success_condition, OBS_DIM};
pub use task::{Aabb, TaskKind, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::geometry::{Rotation, Vec3};

/// Number of policy action dimensions: translation (3), rotation (3), gripper (1).
pub const ACTION_DIM: usize = 7;

/// Environment flags. `grasped` and `contact` track the current step; the
/// remaining booleans are sticky for the rest of the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags {
    pub grasped: bool,
    pub lifted: bool,
    pub contact: bool,
    /// The Reach exit event has fired (proximity for grasp tasks, contact for push tasks).
    pub reached: bool,
    /// The coarse goal-approach stage has ended (near goal, or at lift height).
    pub at_target: bool,
    /// Consecutive steps the object has rested inside the success region.
    pub released_stable_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: usize,
    pub ee_pos: Vec3,
    pub ee_rot: Rotation,
    /// 0 = closed, 1 = open.
    pub gripper: f64,
    pub obj_pos: Vec3,
    pub obj_rot: Rotation,
    /// Object position captured at reset; fixes episode normalization scales.
    pub obj_init: Vec3,
    pub goal_pos: Vec3,
    pub flags: Flags,
    pub terminal: bool,
    /// Terminal because the task succeeded (as opposed to the horizon running out).
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimAction {
    pub d_pos: Vec3,
    /// Rotation vector applied to the end-effector in the world frame.
    pub d_rot: Vec3,
    pub gripper_cmd: f64,
}

impl SimAction {
    pub const fn new(d_pos: Vec3, d_rot: Vec3, gripper_cmd: f64) -> Self {
        SimAction { d_pos, d_rot, gripper_cmd }
    }

    /// Hold still with the given gripper command.
    pub const fn hold(gripper_cmd: f64) -> Self {
        SimAction { d_pos: Vec3::ZERO, d_rot: Vec3::ZERO, gripper_cmd }
    }

    /// Clip into the spec's bounds. NaN components become zero.
    pub fn clipped(&self, spec: &TaskSpec) -> SimAction {
        let fix = |v: Vec3| Vec3::new(nan_to_zero(v.x), nan_to_zero(v.y), nan_to_zero(v.z));
        SimAction {
            d_pos: fix(self.d_pos).clip_each(spec.a_max),
            d_rot: fix(self.d_rot).clip_norm(spec.omega_max),
            gripper_cmd: nan_to_zero(self.gripper_cmd).clamp(0.0, 1.0),
        }
    }

    /// Decode a normalized policy output: translation and rotation in units of
    /// their per-step bounds, gripper in `[-1, 1]` (−1 closed, +1 open).
    pub fn from_policy(u: &[f64], spec: &TaskSpec) -> SimAction {
        debug_assert_eq!(u.len(), ACTION_DIM);
        SimAction {
            d_pos: Vec3::new(u[0], u[1], u[2]) * spec.a_max,
            d_rot: Vec3::new(u[3], u[4], u[5]) * spec.omega_max,
            gripper_cmd: 0.5 * (u[6] + 1.0),
        }
        .clipped(spec)
    }

    /// Inverse of [`SimAction::from_policy`] for in-bounds actions.
    pub fn to_policy(&self, spec: &TaskSpec) -> [f64; ACTION_DIM] {
        let p = self.d_pos * (1.0 / spec.a_max);
        let r = self.d_rot * (1.0 / spec.omega_max);
        [p.x, p.y, p.z, r.x, r.y, r.z, 2.0 * self.gripper_cmd - 1.0]
    }
}

fn nan_to_zero(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: SimState,
    pub action: SimAction,
    pub reward: f64,
    pub next_state: SimState,
    pub done: bool,
}

/// One episode: consecutive transitions sharing an episode seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskKind,
    pub episode: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn succeeded(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.next_state.success)
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn final_state(&self) -> Option<&SimState> {
        self.transitions.last().map(|t| &t.next_state)
    }
}

/// Roll out `policy` from `reset(spec, episode)` until the episode ends.
pub fn rollout<F>(spec: &TaskSpec, episode: u64, mut policy: F) -> crate::Result<Trajectory>
where
    F: FnMut(&SimState) -> SimAction,
{
    let mut state = reset(spec, episode);
    let mut transitions = Vec::with_capacity(spec.horizon);
    while !state.terminal {
        let action = policy(&state);
        let tr = step(&state, &action, spec)?;
        state = tr.next_state.clone();
        transitions.push(tr);
    }
    Ok(Trajectory { task: spec.kind, episode, transitions })
}
