use std::f64::consts::PI;

use rand::Rng;

use super::{Flags, SimAction, SimState, TaskKind, TaskSpec, Transition};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_rotation, geodesic_distance, Rotation, Vec3};
use crate::seeding::rng_from;

/// Observation width: ee (3), gripper (1), object (3), object rotation
/// columns 0–1 (6), goal (3), grasped/lifted/contact (3), time fraction (1).
pub const OBS_DIM: usize = 20;

const GOAL_TRIES: usize = 64;

/// Initial state for `(spec, episode_seed)`; a pure function of both.
pub fn reset(spec: &TaskSpec, episode_seed: u64) -> SimState {
    let mut rng = rng_from(spec.seed, episode_seed);
    let unit3 = |rng: &mut rand_chacha::ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];

    let obj = spec.obj_range.lerp(unit3(&mut rng));
    let (goal, obj_rot) = match spec.kind {
        TaskKind::LiftPegUpright => {
            let (lo, hi) = spec.tilt_range;
            let tilt = lo + (hi - lo) * rng.random::<f64>();
            let phi = 2.0 * PI * rng.random::<f64>();
            let axis = Vec3::new(phi.cos(), phi.sin(), 0.0);
            let rot = axis_angle_to_rotation(axis, tilt).expect("horizontal unit axis");
            (Vec3::new(obj.x, obj.y, spec.lift_goal), rot.compose(&spec.upright))
        }
        _ => {
            let mut goal = spec.goal_range.lerp(unit3(&mut rng));
            for _ in 1..GOAL_TRIES {
                if goal.distance(obj) >= spec.min_goal_separation() {
                    break;
                }
                goal = spec.goal_range.lerp(unit3(&mut rng));
            }
            (goal, Rotation::IDENTITY)
        }
    };

    SimState {
        t: 0,
        ee_pos: spec.home,
        ee_rot: Rotation::IDENTITY,
        gripper: 1.0,
        obj_pos: obj,
        obj_rot,
        obj_init: obj,
        goal_pos: goal,
        flags: Flags::default(),
        terminal: false,
        success: false,
    }
}

/// Advance one step. Stepping a terminal state is a contract violation.
pub fn step(state: &SimState, action: &SimAction, spec: &TaskSpec) -> Result<Transition> {
    if state.terminal {
        return Err(Error::Contract(format!("step called on terminal state at t = {}", state.t)));
    }
    let a = action.clipped(spec);
    let mut s = state.clone();
    s.t += 1;

    let ws = &spec.workspace;
    let ee_old = state.ee_pos;
    let mut ee_new = (ee_old + a.d_pos).clamp(ws.min, ws.max);
    let turn = Rotation::from_rotation_vector(a.d_rot);
    s.ee_rot = turn.compose(&state.ee_rot);
    s.gripper = a.gripper_cmd;
    let closing = a.gripper_cmd < 0.5;

    if spec.kind.uses_grasp() {
        if s.flags.grasped && !closing {
            s.flags.grasped = false;
        }
        if s.flags.grasped {
            // Rigid attachment: the grasp offset turns with the end-effector.
            let mut obj_new = ee_new + turn.apply(state.obj_pos - ee_old);
            if obj_new.z < spec.table_height {
                let lift = spec.table_height - obj_new.z;
                obj_new.z = spec.table_height;
                ee_new.z += lift;
            }
            s.obj_pos = obj_new;
            s.obj_rot = turn.compose(&state.obj_rot);
        } else {
            // An unsupported object settles onto the table.
            s.obj_pos.z = spec.table_height;
        }
        s.ee_pos = ee_new;
        if !s.flags.grasped && closing && ee_new.distance(s.obj_pos) <= spec.grasp_radius() {
            s.flags.grasped = true;
        }
    } else {
        // Quasi-static planar contact: the object mirrors the planar displacement.
        if ee_old.distance(state.obj_pos) <= spec.contact_radius() {
            let mut obj = state.obj_pos;
            obj.x = (obj.x + ee_new.x - ee_old.x).clamp(ws.min.x, ws.max.x);
            obj.y = (obj.y + ee_new.y - ee_old.y).clamp(ws.min.y, ws.max.y);
            s.obj_pos = obj;
        }
        s.ee_pos = ee_new;
        s.flags.contact = ee_new.distance(s.obj_pos) <= spec.contact_radius();
    }

    update_flags(&mut s, spec);
    let success = success_condition(&s, spec);
    let done = success || s.t >= spec.horizon;
    s.terminal = done;
    s.success = success;
    Ok(Transition { state: state.clone(), action: a, reward: if success { 1.0 } else { 0.0 }, next_state: s, done })
}

fn update_flags(s: &mut SimState, spec: &TaskSpec) {
    let f = &mut s.flags;
    let obj_goal = s.obj_pos.distance(s.goal_pos);
    match spec.kind {
        TaskKind::PickPlace | TaskKind::LiftPegUpright => {
            f.reached |= f.grasped || s.ee_pos.distance(s.obj_pos) <= spec.reach_threshold();
            f.lifted |= f.grasped && s.obj_pos.z > spec.table_height + spec.lift_threshold();
            if f.lifted {
                f.at_target |= match spec.kind {
                    TaskKind::PickPlace => obj_goal <= spec.near_goal_margin(),
                    _ => (s.obj_pos.z - spec.lift_goal).abs() <= spec.lift_band(),
                };
            }
        }
        TaskKind::Push | TaskKind::Pull => {
            f.reached |= f.contact;
            f.at_target |= f.reached && obj_goal <= spec.near_goal_margin();
        }
    }
    let resting_in_goal = match spec.kind {
        TaskKind::PickPlace => !f.grasped && obj_goal <= spec.success_radius(),
        TaskKind::Push | TaskKind::Pull => obj_goal <= spec.success_radius(),
        TaskKind::LiftPegUpright => false,
    };
    f.released_stable_count = if resting_in_goal { f.released_stable_count + 1 } else { 0 };
}

/// Task success predicate on a single state.
pub fn success_condition(state: &SimState, spec: &TaskSpec) -> bool {
    let f = &state.flags;
    match spec.kind {
        TaskKind::PickPlace => {
            state.obj_pos.distance(state.goal_pos) <= spec.success_radius()
                && !f.grasped
                && f.released_stable_count >= spec.stable_steps()
        }
        TaskKind::Push | TaskKind::Pull => {
            state.obj_pos.distance(state.goal_pos) <= spec.success_radius()
                && f.released_stable_count >= spec.stable_steps()
        }
        TaskKind::LiftPegUpright => {
            f.grasped
                && (state.obj_pos.z - spec.lift_goal).abs() <= spec.height_tolerance()
                && geodesic_distance(&state.obj_rot, &spec.upright) <= spec.upright_tolerance()
        }
    }
}

/// Flat policy observation; positions are standardized by the workspace box.
pub fn observe(state: &SimState, spec: &TaskSpec) -> [f64; OBS_DIM] {
    let c = spec.workspace.center();
    let h = spec.workspace.half_extent();
    let norm = |p: Vec3| [(p.x - c.x) / h.x, (p.y - c.y) / h.y, (p.z - c.z) / h.z];
    let bit = |b: bool| if b { 1.0 } else { 0.0 };
    let mut o = [0.0; OBS_DIM];
    o[0..3].copy_from_slice(&norm(state.ee_pos));
    o[3] = 2.0 * state.gripper - 1.0;
    o[4..7].copy_from_slice(&norm(state.obj_pos));
    o[7..10].copy_from_slice(&state.obj_rot.column(0).to_array());
    o[10..13].copy_from_slice(&state.obj_rot.column(1).to_array());
    o[13..16].copy_from_slice(&norm(state.goal_pos));
    o[16] = bit(state.flags.grasped);
    o[17] = bit(state.flags.lifted);
    o[18] = bit(state.flags.contact);
    o[19] = state.t as f64 / spec.horizon as f64;
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{scripted_expert, Aabb};

    fn grasped_state(spec: &TaskSpec) -> SimState {
        let mut s = reset(spec, 3);
        s.ee_pos = s.obj_pos + Vec3::new(0.0, 0.0, 0.001);
        let tr = step(&s, &SimAction::hold(0.0), spec).unwrap();
        assert!(tr.next_state.flags.grasped);
        tr.next_state
    }

    #[test]
    fn reset_is_deterministic() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            assert_eq!(reset(&spec, 11), reset(&spec, 11));
            assert_ne!(reset(&spec, 11), reset(&spec, 12));
        }
    }

    #[test]
    fn resets_stay_in_workspace() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            for ep in 0..1000 {
                let s = reset(&spec, ep);
                assert!(spec.workspace.contains(s.obj_pos) && spec.workspace.contains(s.goal_pos));
                assert_eq!(s.t, 0);
                assert_eq!(s.flags, Flags::default());
            }
        }
    }

    #[test]
    fn degenerate_range_gives_center() {
        let mut spec = TaskSpec::new(TaskKind::PickPlace);
        let c = Vec3::new(0.42, 0.05, 0.0);
        spec.obj_range = Aabb::new(c, c);
        for ep in 0..20 {
            assert_eq!(reset(&spec, ep).obj_pos, c);
        }
    }

    #[test]
    fn zero_action_changes_only_time_and_gripper() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let s = reset(&spec, 5);
        let tr = step(&s, &SimAction::hold(0.0), &spec).unwrap();
        let n = &tr.next_state;
        assert_eq!(n.t, 1);
        assert_eq!((n.ee_pos, n.ee_rot, n.obj_pos, n.obj_rot, n.goal_pos), (s.ee_pos, s.ee_rot, s.obj_pos, s.obj_rot, s.goal_pos));
        assert_eq!(n.flags, s.flags);
        assert_eq!(tr.reward, 0.0);
    }

    #[test]
    fn grasped_object_rises_with_end_effector() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let s = grasped_state(&spec);
        let tr = step(&s, &SimAction::new(Vec3::new(0.0, 0.0, spec.a_max), Vec3::ZERO, 0.0), &spec).unwrap();
        assert!((tr.next_state.obj_pos.z - s.obj_pos.z - spec.a_max).abs() < 1e-15);
        assert!(tr.next_state.flags.lifted);
    }

    #[test]
    fn attachment_distance_is_preserved() {
        let spec = TaskSpec::new(TaskKind::LiftPegUpright);
        let mut s = grasped_state(&spec);
        s.ee_pos = s.ee_pos + Vec3::new(0.0, 0.0, 0.004);
        s.obj_pos = s.obj_pos + Vec3::new(0.0, 0.0, 0.004);
        let d0 = s.ee_pos.distance(s.obj_pos);
        for i in 0..30 {
            let a = SimAction::new(Vec3::new(0.003, -0.002, 0.004), Vec3::new(0.05, 0.02 * (i as f64).sin(), -0.04), 0.0);
            s = step(&s, &a, &spec).unwrap().next_state;
            assert!((s.ee_pos.distance(s.obj_pos) - d0).abs() < 1e-12);
            if s.terminal {
                break;
            }
        }
    }

    #[test]
    fn opening_releases_and_object_settles() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let mut s = grasped_state(&spec);
        s = step(&s, &SimAction::new(Vec3::new(0.0, 0.0, 0.02), Vec3::ZERO, 0.0), &spec).unwrap().next_state;
        let s2 = step(&s, &SimAction::hold(1.0), &spec).unwrap().next_state;
        assert!(!s2.flags.grasped);
        assert!(s2.flags.lifted, "lifted is sticky");
        assert_eq!(s2.obj_pos.z, spec.table_height);
    }

    #[test]
    fn terminal_state_cannot_step() {
        let mut spec = TaskSpec::new(TaskKind::Push);
        spec.horizon = 1;
        let s = reset(&spec, 0);
        let tr = step(&s, &SimAction::hold(1.0), &spec).unwrap();
        assert!(tr.done && tr.next_state.terminal && !tr.next_state.success);
        assert!(matches!(step(&tr.next_state, &SimAction::hold(1.0), &spec), Err(Error::Contract(_))));
    }

    #[test]
    fn success_predicates() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let mut s = reset(&spec, 1);
        s.obj_pos = s.goal_pos;
        s.flags.grasped = true;
        s.flags.released_stable_count = 5;
        assert!(!success_condition(&s, &spec));
        s.flags.grasped = false;
        assert!(success_condition(&s, &spec));
        s.flags.released_stable_count = 4;
        assert!(!success_condition(&s, &spec));

        let spec = TaskSpec::new(TaskKind::LiftPegUpright);
        let mut s = reset(&spec, 1);
        s.obj_rot = spec.upright;
        s.obj_pos.z = spec.lift_goal;
        s.flags.grasped = true;
        assert!(success_condition(&s, &spec));
        s.flags.grasped = false;
        assert!(!success_condition(&s, &spec));
    }

    #[test]
    fn push_contact_moves_object_in_plane() {
        let spec = TaskSpec::new(TaskKind::Push);
        let mut s = reset(&spec, 2);
        s.ee_pos = s.obj_pos - Vec3::new(0.01, 0.0, 0.0);
        let o = s.obj_pos;
        let tr = step(&s, &SimAction::new(Vec3::new(0.015, 0.005, 0.0), Vec3::ZERO, 1.0), &spec).unwrap();
        let n = &tr.next_state;
        assert!((n.obj_pos.x - o.x - 0.015).abs() < 1e-15 && (n.obj_pos.y - o.y - 0.005).abs() < 1e-15);
        assert_eq!(n.obj_pos.z, o.z);
        assert!(n.flags.contact && n.flags.reached);
    }

    #[test]
    fn determinism_and_reward_sparsity() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            for ep in 0..20 {
                let a = crate::env::rollout(&spec, ep, |s| scripted_expert(s, &spec)).unwrap();
                let b = crate::env::rollout(&spec, ep, |s| scripted_expert(s, &spec)).unwrap();
                assert_eq!(a, b);
                let total = a.total_reward();
                assert!(total == 0.0 || total == 1.0);
                assert_eq!(total == 1.0, a.succeeded());
                for tr in &a.transitions {
                    assert!(spec.workspace.contains(tr.next_state.ee_pos));
                }
            }
        }
    }

    #[test]
    fn observation_layout() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let s = reset(&spec, 0);
        let o = observe(&s, &spec);
        assert!(o.iter().all(|v| v.is_finite()));
        assert_eq!(o[3], 1.0);
        assert_eq!(&o[7..13], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&o[16..20], &[0.0, 0.0, 0.0, 0.0]);
    }
}
