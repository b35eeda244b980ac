//! Stage-aware reinforcement signals.
//!
//! The separator maps every state to a stage label using the simulator's
//! event flags; the calculator scores segments (mean deviation cost) and
//! states (logistic progress potential). Because labels are pure functions of
//! [`SimState`], `Φ(s) = Φ_{g(s)}(s)` is a single state potential and the
//! shaped reward `r + γΦ(s') − Φ(s)` leaves optimal policies unchanged.

mod segment;

pub use segment::{segment, stage_cost, StageSegment};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{SimState, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Reach,
    Grasp,
    Transport,
    Place,
    Push,
    Pull,
    Goal,
    Lift,
    Upright,
    Done,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Reach => "reach",
            StageId::Grasp => "grasp",
            StageId::Transport => "transport",
            StageId::Place => "place",
            StageId::Push => "push",
            StageId::Pull => "pull",
            StageId::Goal => "goal",
            StageId::Lift => "lift",
            StageId::Upright => "upright",
            StageId::Done => "done",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "reach" => StageId::Reach,
            "grasp" => StageId::Grasp,
            "transport" => StageId::Transport,
            "place" => StageId::Place,
            "push" => StageId::Push,
            "pull" => StageId::Pull,
            "goal" => StageId::Goal,
            "lift" => StageId::Lift,
            "upright" => StageId::Upright,
            "done" => StageId::Done,
            other => return Err(Error::Config(format!("unknown stage '{other}'"))),
        })
    }
}

/// Ordered stage list for a task family.
pub fn stages_for(kind: TaskKind) -> &'static [StageId] {
    use StageId::*;
    match kind {
        TaskKind::PickPlace => &[Reach, Grasp, Transport, Place],
        TaskKind::Push => &[Reach, Push, Goal],
        TaskKind::Pull => &[Reach, Pull, Goal],
        TaskKind::LiftPegUpright => &[Reach, Grasp, Lift, Upright],
    }
}

/// Which normalization scale a stage's potential uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `L_obj`.
    ObjectSize,
    /// `‖x_obj_init − x_goal‖`.
    InitialGoalDistance,
    /// `z_goal − z_table`.
    LiftHeight,
    /// `π`, the diameter of SO(3).
    RotationDiameter,
}

/// Transition thresholds, all derived from task geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub reach: f64,
    pub grasp_radius: f64,
    pub contact_radius: f64,
    pub lift_height: f64,
    pub near_goal: f64,
    pub lift_band: f64,
    pub upright: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub task: TaskKind,
    pub stages: Vec<StageId>,
    pub thresholds: Thresholds,
    pub scales: Vec<ScaleRule>,
    pub object_size: f64,
    /// Penalty weight on normalized stage cost.
    pub lambda: f64,
}

pub const DEFAULT_LAMBDA: f64 = 0.1;

impl StageProfile {
    pub fn for_spec(spec: &TaskSpec) -> Self {
        let stages = stages_for(spec.kind).to_vec();
        let scales = stages.iter().map(|&s| scale_rule(s)).collect();
        StageProfile {
            task: spec.kind,
            stages,
            thresholds: Thresholds {
                reach: spec.reach_threshold(),
                grasp_radius: spec.grasp_radius(),
                contact_radius: spec.contact_radius(),
                lift_height: spec.lift_threshold(),
                near_goal: spec.near_goal_margin(),
                lift_band: spec.lift_band(),
                upright: spec.upright_tolerance(),
            },
            scales,
            object_size: spec.object_size,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Position of `stage` in the task order; `Done` sorts after every stage.
    pub fn index_of(&self, stage: StageId) -> Option<usize> {
        if stage == StageId::Done {
            return Some(self.stages.len());
        }
        self.stages.iter().position(|&s| s == stage)
    }
}

fn scale_rule(stage: StageId) -> ScaleRule {
    match stage {
        StageId::Reach | StageId::Grasp | StageId::Place | StageId::Goal | StageId::Done => ScaleRule::ObjectSize,
        StageId::Transport | StageId::Push | StageId::Pull => ScaleRule::InitialGoalDistance,
        StageId::Lift => ScaleRule::LiftHeight,
        StageId::Upright => ScaleRule::RotationDiameter,
    }
}

/// Stage label of a state. Flags are sticky, so labels never regress.
pub fn stage_of(state: &SimState, spec: &TaskSpec) -> StageId {
    if state.success {
        return StageId::Done;
    }
    let f = &state.flags;
    match spec.kind {
        TaskKind::PickPlace => {
            if f.at_target {
                StageId::Place
            } else if f.lifted {
                StageId::Transport
            } else if f.reached {
                StageId::Grasp
            } else {
                StageId::Reach
            }
        }
        TaskKind::LiftPegUpright => {
            if f.at_target {
                StageId::Upright
            } else if f.lifted {
                StageId::Lift
            } else if f.reached {
                StageId::Grasp
            } else {
                StageId::Reach
            }
        }
        TaskKind::Push | TaskKind::Pull => {
            if f.at_target {
                StageId::Goal
            } else if f.reached {
                if spec.kind == TaskKind::Push {
                    StageId::Push
                } else {
                    StageId::Pull
                }
            } else {
                StageId::Reach
            }
        }
    }
}

/// Per-state deviation a stage tries to drive to zero (meters, or radians for Upright).
pub fn stage_deviation(state: &SimState, stage: StageId, spec: &TaskSpec) -> f64 {
    match stage {
        StageId::Reach | StageId::Grasp => state.ee_pos.distance(state.obj_pos),
        StageId::Transport | StageId::Place | StageId::Push | StageId::Pull | StageId::Goal => {
            state.obj_pos.distance(state.goal_pos)
        }
        StageId::Lift => (state.obj_pos.z - spec.lift_goal).abs(),
        StageId::Upright => geodesic_distance(&spec.upright, &state.obj_rot),
        StageId::Done => 0.0,
    }
}

/// Normalization scale `d^max` of a stage for the episode that `state` belongs to.
pub fn stage_scale(state: &SimState, stage: StageId, spec: &TaskSpec) -> f64 {
    match scale_rule(stage) {
        ScaleRule::ObjectSize => spec.object_size,
        // Floored at L_obj; resets already keep the goal well away from the object.
        ScaleRule::InitialGoalDistance => state.obj_init.distance(state.goal_pos).max(spec.object_size),
        ScaleRule::LiftHeight => spec.lift_goal - spec.table_height,
        ScaleRule::RotationDiameter => PI,
    }
}

/// `Φ_k(s) = σ(1 − d/d^max)` for an explicit stage.
pub fn stage_potential(state: &SimState, stage: StageId, spec: &TaskSpec) -> f64 {
    if stage == StageId::Done {
        return 0.0;
    }
    logistic(1.0 - stage_deviation(state, stage, spec) / stage_scale(state, stage, spec))
}

/// Composite potential `Φ(s) = Φ_{g(s)}(s)`, zero on successful terminal states.
pub fn potential(state: &SimState, spec: &TaskSpec) -> f64 {
    stage_potential(state, stage_of(state, spec), spec)
}

/// `r + γΦ(s') − Φ(s)`.
pub fn shape_reward(reward: f64, state: &SimState, next: &SimState, spec: &TaskSpec, gamma: f64) -> f64 {
    reward + gamma * potential(next, spec) - potential(state, spec)
}

/// `q̂ = q − λℓ`.
pub fn penalized_score(q: f64, cost: f64, lambda: f64) -> f64 {
    q - lambda * cost
}
