//! Scripted demonstrators.
//!
//! The expert is a stage-greedy waypoint controller: it reads the current
//! stage label and takes the largest admissible step that reduces that
//! stage's deviation. Failure modes perturb the same controller.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{SimAction, SimState, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_rotation, Rotation, Vec3};
use crate::stare::{stage_of, stages_for, StageId};

const OPEN: f64 = 1.0;
const CLOSED: f64 = 0.0;
/// Arrival tolerance for exact waypoint landings.
const ARRIVED: f64 = 1e-9;
/// Residual peg tilt left by the wrong-goal demonstrator (radians).
const WRONG_TILT: f64 = 0.3;

/// Ways to break the expert at a controllable stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Drop the object as soon as it is lifted (push tasks: break contact).
    EarlyRelease,
    /// Close the gripper well above the object.
    MissGrasp,
    /// Carry the object to a shifted goal (tilted target for the peg).
    WrongGoal,
    /// Freeze as soon as the given stage is entered.
    StallAt(StageId),
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureMode::EarlyRelease => f.write_str("early_release"),
            FailureMode::MissGrasp => f.write_str("miss_grasp"),
            FailureMode::WrongGoal => f.write_str("wrong_goal"),
            FailureMode::StallAt(k) => write!(f, "stall_at_{k}"),
        }
    }
}

impl FromStr for FailureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "early_release" => return Ok(FailureMode::EarlyRelease),
            "miss_grasp" => return Ok(FailureMode::MissGrasp),
            "wrong_goal" => return Ok(FailureMode::WrongGoal),
            _ => {}
        }
        let stage = norm
            .strip_prefix("stall_at_stage_k=")
            .or_else(|| norm.strip_prefix("stall_at_stage_"))
            .or_else(|| norm.strip_prefix("stall_at_"))
            .or_else(|| norm.strip_prefix("stall:"));
        match stage.map(str::parse::<StageId>) {
            Some(Ok(k)) if k != StageId::Done => Ok(FailureMode::StallAt(k)),
            _ => Err(Error::UnknownFailureMode(s.to_string())),
        }
    }
}

/// Failure modes that together end episodes in every stage of the task.
pub fn default_failure_modes(kind: TaskKind) -> Vec<FailureMode> {
    if kind.uses_grasp() {
        vec![FailureMode::MissGrasp, FailureMode::StallAt(StageId::Grasp), FailureMode::EarlyRelease, FailureMode::WrongGoal]
    } else {
        vec![FailureMode::MissGrasp, FailureMode::EarlyRelease, FailureMode::WrongGoal]
    }
}

/// Expert action for `state`.
pub fn scripted_expert(state: &SimState, spec: &TaskSpec) -> SimAction {
    drive(state, spec, None)
}

/// Expert perturbed by `mode`. Stalling at a stage the task does not have is an error.
pub fn corrupt_expert(state: &SimState, spec: &TaskSpec, mode: FailureMode) -> Result<SimAction> {
    if let FailureMode::StallAt(k) = mode {
        if !stages_for(spec.kind).contains(&k) {
            return Err(Error::UnknownFailureMode(format!("stall_at_{k} (task {} has no such stage)", spec.kind)));
        }
    }
    Ok(drive(state, spec, Some(mode)))
}

fn drive(state: &SimState, spec: &TaskSpec, mode: Option<FailureMode>) -> SimAction {
    let stage = stage_of(state, spec);
    if stage == StageId::Done {
        return SimAction::hold(state.gripper);
    }
    if mode == Some(FailureMode::StallAt(stage)) && !stalls_by_undershoot(spec, stage) {
        return SimAction::hold(state.gripper);
    }
    match spec.kind {
        TaskKind::PickPlace => pick_place(state, spec, stage, mode),
        TaskKind::LiftPegUpright => lift_peg(state, spec, stage, mode),
        TaskKind::Push | TaskKind::Pull => push_pull(state, spec, stage, mode),
    }
}

/// Push/Pull have no release event in the final stage, so stalling there means
/// stopping short of the success region rather than freezing on entry.
fn stalls_by_undershoot(spec: &TaskSpec, stage: StageId) -> bool {
    !spec.kind.uses_grasp() && stage == StageId::Goal
}

fn translate(d: Vec3, grip: f64) -> SimAction {
    SimAction::new(d, Vec3::ZERO, grip)
}

/// Move the end-effector toward `target`; close on exact arrival.
fn approach_and_close(state: &SimState, spec: &TaskSpec, target: Vec3) -> SimAction {
    let d = state.ee_pos.step_toward(target, spec.a_max);
    let arrived = (state.ee_pos + d).distance(target) <= ARRIVED;
    translate(d, if arrived { CLOSED } else { OPEN })
}

/// While grasped, move so the object heads toward `target`.
fn carry(state: &SimState, spec: &TaskSpec, target: Vec3) -> SimAction {
    translate(state.obj_pos.step_toward(target, spec.a_max), CLOSED)
}

fn retreat(spec: &TaskSpec) -> SimAction {
    translate(Vec3::new(0.0, 0.0, spec.a_max), OPEN)
}

fn miss_offset(spec: &TaskSpec) -> Vec3 {
    Vec3::new(0.0, 0.0, 1.5 * spec.object_size)
}

fn shifted_goal(state: &SimState, spec: &TaskSpec, mode: Option<FailureMode>) -> Vec3 {
    if mode == Some(FailureMode::WrongGoal) {
        state.goal_pos + Vec3::new(0.0, 0.8 * spec.object_size, 0.0)
    } else {
        state.goal_pos
    }
}

fn pick_place(state: &SimState, spec: &TaskSpec, stage: StageId, mode: Option<FailureMode>) -> SimAction {
    let goal = shifted_goal(state, spec, mode);
    let carry_height = 0.5 * spec.object_size;
    if !state.flags.grasped {
        if state.flags.lifted {
            // Released after transport (or dropped): clear the object.
            return retreat(spec);
        }
        let offset = if mode == Some(FailureMode::MissGrasp) { miss_offset(spec) } else { Vec3::ZERO };
        if mode == Some(FailureMode::MissGrasp) && state.gripper < 0.5 {
            return retreat_closed(spec);
        }
        return approach_and_close(state, spec, state.obj_pos + offset);
    }
    match stage {
        StageId::Reach | StageId::Grasp => {
            let up = Vec3::new(state.obj_pos.x, state.obj_pos.y, spec.table_height + carry_height);
            carry(state, spec, up)
        }
        StageId::Transport => {
            if mode == Some(FailureMode::EarlyRelease) {
                return SimAction::hold(OPEN);
            }
            carry(state, spec, goal + Vec3::new(0.0, 0.0, carry_height))
        }
        _ => {
            if state.obj_pos.distance(goal) <= ARRIVED {
                SimAction::hold(OPEN)
            } else {
                carry(state, spec, goal)
            }
        }
    }
}

fn retreat_closed(spec: &TaskSpec) -> SimAction {
    translate(Vec3::new(0.0, 0.0, spec.a_max), CLOSED)
}

fn lift_peg(state: &SimState, spec: &TaskSpec, stage: StageId, mode: Option<FailureMode>) -> SimAction {
    if !state.flags.grasped {
        if state.flags.lifted {
            return SimAction::hold(OPEN);
        }
        if mode == Some(FailureMode::MissGrasp) {
            if state.gripper < 0.5 {
                return retreat_closed(spec);
            }
            return approach_and_close(state, spec, state.obj_pos + miss_offset(spec));
        }
        return approach_and_close(state, spec, state.obj_pos);
    }
    let at_height = Vec3::new(state.obj_pos.x, state.obj_pos.y, spec.lift_goal);
    match stage {
        StageId::Reach | StageId::Grasp => carry(state, spec, at_height),
        StageId::Lift => {
            if mode == Some(FailureMode::EarlyRelease) {
                return SimAction::hold(OPEN);
            }
            carry(state, spec, at_height)
        }
        _ => {
            let target = if mode == Some(FailureMode::WrongGoal) {
                // Straighten only down to a residual tilt about the current axis.
                let tilt = state.obj_rot.compose(&spec.upright.transpose()).log();
                let n = tilt.norm();
                let axis = if n > 1e-12 { tilt * (1.0 / n) } else { Vec3::new(1.0, 0.0, 0.0) };
                axis_angle_to_rotation(axis, WRONG_TILT)
                    .unwrap_or(spec.upright)
                    .compose(&spec.upright)
            } else {
                spec.upright
            };
            rotate_in_place(state, spec, &target, at_height)
        }
    }
}

/// Turn the held object toward `target` while steering its position to `hold_at`.
fn rotate_in_place(state: &SimState, spec: &TaskSpec, target: &Rotation, hold_at: Vec3) -> SimAction {
    let error = target.compose(&state.obj_rot.transpose()).log();
    let d_rot = error.clip_norm(spec.omega_max);
    let turn = Rotation::from_rotation_vector(d_rot);
    let ee_goal = hold_at - turn.apply(state.obj_pos - state.ee_pos);
    let d_pos = (ee_goal - state.ee_pos).clip_norm(spec.a_max);
    SimAction::new(d_pos, d_rot, CLOSED)
}

fn push_pull(state: &SimState, spec: &TaskSpec, stage: StageId, mode: Option<FailureMode>) -> SimAction {
    let planar = |to: Vec3| {
        let mut d = to - state.obj_pos;
        d.z = 0.0;
        d.clip_norm(spec.a_max)
    };
    match stage {
        StageId::Reach => {
            let offset = if mode == Some(FailureMode::MissGrasp) { miss_offset(spec) } else { Vec3::ZERO };
            let target = state.obj_pos + offset;
            if mode == Some(FailureMode::MissGrasp) && state.ee_pos.distance(target) <= ARRIVED {
                return translate(planar(state.goal_pos), OPEN);
            }
            translate(state.ee_pos.step_toward(target, spec.a_max), OPEN)
        }
        StageId::Push | StageId::Pull => {
            if mode == Some(FailureMode::EarlyRelease) {
                return retreat(spec);
            }
            translate(planar(shifted_goal(state, spec, mode)), OPEN)
        }
        _ => {
            let goal = if mode == Some(FailureMode::StallAt(StageId::Goal)) {
                // Stop short of the success region, on the approach side.
                let mut back = state.obj_init - state.goal_pos;
                back.z = 0.0;
                state.goal_pos + back * (0.8 * spec.object_size / back.norm())
            } else {
                shifted_goal(state, spec, mode)
            };
            if state.obj_pos.distance(goal) <= ARRIVED {
                if mode.is_some() {
                    return SimAction::hold(OPEN);
                }
                return retreat(spec);
            }
            translate(planar(goal), OPEN)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, rollout};
    use crate::geometry::geodesic_distance;
    use crate::stare::{segment, StageProfile};

    #[test]
    fn expert_succeeds_everywhere() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            for ep in 0..100 {
                let traj = rollout(&spec, ep, |s| scripted_expert(s, &spec)).unwrap();
                assert!(traj.succeeded(), "{kind} episode {ep} failed after {} steps", traj.len());
                if kind == TaskKind::LiftPegUpright {
                    let last = traj.final_state().unwrap();
                    assert!(geodesic_distance(&last.obj_rot, &spec.upright) <= 0.1);
                }
            }
        }
    }

    #[test]
    fn far_state_moves_full_step_toward_object() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let s = reset(&spec, 0);
        let a = scripted_expert(&s, &spec);
        assert!((a.d_pos.norm() - spec.a_max).abs() < 1e-15);
        let dir = (s.obj_pos - s.ee_pos) * (1.0 / s.obj_pos.distance(s.ee_pos));
        assert!((a.d_pos.dot(dir) - spec.a_max).abs() < 1e-15);
    }

    #[test]
    fn failure_mode_parsing() {
        assert_eq!("miss_grasp".parse::<FailureMode>().unwrap(), FailureMode::MissGrasp);
        assert_eq!("stall_at_stage_k=Place".parse::<FailureMode>().unwrap(), FailureMode::StallAt(StageId::Place));
        assert_eq!("stall_at_lift".parse::<FailureMode>().unwrap(), FailureMode::StallAt(StageId::Lift));
        for mode in [FailureMode::EarlyRelease, FailureMode::WrongGoal, FailureMode::StallAt(StageId::Upright)] {
            assert_eq!(mode.to_string().parse::<FailureMode>().unwrap(), mode);
        }
        assert!(matches!("teleport".parse::<FailureMode>(), Err(Error::UnknownFailureMode(_))));
        let spec = TaskSpec::new(TaskKind::Push);
        let s = reset(&spec, 0);
        assert!(corrupt_expert(&s, &spec, FailureMode::StallAt(StageId::Lift)).is_err());
    }

    fn corrupt_stages(kind: TaskKind, mode: FailureMode, ep: u64) -> (Vec<(StageId, bool)>, bool) {
        let spec = TaskSpec::new(kind);
        let traj = rollout(&spec, ep, |s| corrupt_expert(s, &spec, mode).unwrap()).unwrap();
        let segs = segment(&traj, &spec, &StageProfile::for_spec(&spec)).unwrap();
        (segs.iter().map(|s| (s.stage, s.completed)).collect(), traj.succeeded())
    }

    #[test]
    fn stall_stops_at_every_stage() {
        for kind in TaskKind::ALL {
            for (i, &k) in stages_for(kind).iter().enumerate() {
                for ep in 0..20 {
                    let (segs, ok) = corrupt_stages(kind, FailureMode::StallAt(k), ep);
                    assert!(!ok, "{kind} stall {k} ep {ep}");
                    assert_eq!(segs.len(), i + 1, "{kind} stall {k} ep {ep}: {segs:?}");
                    assert_eq!(*segs.last().unwrap(), (k, false));
                    assert!(segs[..i].iter().all(|s| s.1));
                }
            }
        }
    }

    #[test]
    fn wrong_goal_reaches_final_stage_without_success() {
        for kind in TaskKind::ALL {
            let last = *stages_for(kind).last().unwrap();
            for ep in 0..20 {
                let (segs, ok) = corrupt_stages(kind, FailureMode::WrongGoal, ep);
                assert!(!ok);
                assert_eq!(*segs.last().unwrap(), (last, false), "{kind} ep {ep}");
            }
        }
    }

    #[test]
    fn early_release_fails_in_second_half() {
        for kind in TaskKind::ALL {
            let stages = stages_for(kind);
            for ep in 0..20 {
                let (segs, ok) = corrupt_stages(kind, FailureMode::EarlyRelease, ep);
                assert!(!ok);
                let (stage, completed) = *segs.last().unwrap();
                assert!(!completed);
                assert_eq!(stage, stages[stages.len() - 2], "{kind} ep {ep}");
            }
        }
    }
}
