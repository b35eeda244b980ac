use serde::{Deserialize, Serialize};

use super::{stage_deviation, stage_of, stage_scale, StageId, StageProfile};
use crate::env::{SimState, TaskSpec, Trajectory};
use crate::error::{Error, Result};

/// A maximal run of steps sharing one stage label, over `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSegment {
    pub stage: StageId,
    pub start: usize,
    pub end: usize,
    /// Mean deviation in meters (radians for Upright).
    pub cost_raw: f64,
    /// `cost_raw / d^max` for the stage.
    pub cost_normalized: f64,
    pub completed: bool,
}

impl StageSegment {
    pub fn steps(&self) -> usize {
        self.end - self.start
    }
}

/// Mean stage deviation over a non-empty run of states.
pub fn stage_cost<'a, I>(states: I, stage: StageId, spec: &TaskSpec) -> Result<f64>
where
    I: IntoIterator<Item = &'a SimState>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for s in states {
        sum += stage_deviation(s, stage, spec);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty(format!("no states in {stage} segment")));
    }
    Ok(sum / n as f64)
}

/// Split a trajectory into stage segments. Step `t` carries the label of the
/// state it acted from; the final successor state decides whether the last
/// segment was completed.
pub fn segment(traj: &Trajectory, spec: &TaskSpec, profile: &StageProfile) -> Result<Vec<StageSegment>> {
    let Some(last) = traj.transitions.last() else {
        return Err(Error::Empty(format!("episode {} has no transitions", traj.episode)));
    };
    let labels: Vec<StageId> = traj.transitions.iter().map(|tr| stage_of(&tr.state, spec)).collect();
    let index = |stage: StageId| {
        profile
            .index_of(stage)
            .ok_or_else(|| Error::Contract(format!("stage {stage} is not part of task {}", spec.kind)))
    };

    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t < labels.len() && labels[t] == labels[start] {
            continue;
        }
        let stage = labels[start];
        let here = index(stage)?;
        let next = if t < labels.len() { labels[t] } else { stage_of(&last.next_state, spec) };
        let next_ix = index(next)?;
        if next_ix < here {
            return Err(Error::Contract(format!("stage label regressed from {stage} to {next} at step {t}")));
        }
        let states = traj.transitions[start..t].iter().map(|tr| &tr.state);
        let cost_raw = stage_cost(states, stage, spec)?;
        let scale = stage_scale(&traj.transitions[start].state, stage, spec);
        out.push(StageSegment {
            stage,
            start,
            end: t,
            cost_raw,
            cost_normalized: cost_raw / scale,
            completed: next_ix > here,
        });
        start = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{corrupt_expert, reset, rollout, scripted_expert, step, FailureMode, SimAction, TaskKind, Transition};
    use crate::geometry::{axis_angle_to_rotation, Vec3};

    fn stages(segs: &[StageSegment]) -> Vec<StageId> {
        segs.iter().map(|s| s.stage).collect()
    }

    #[test]
    fn expert_trajectories_complete_every_stage() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            let profile = StageProfile::for_spec(&spec);
            for ep in 0..25 {
                let traj = rollout(&spec, ep, |s| scripted_expert(s, &spec)).unwrap();
                let segs = segment(&traj, &spec, &profile).unwrap();
                assert_eq!(stages(&segs), profile.stages, "{kind} episode {ep}");
                assert!(segs.iter().all(|s| s.completed && s.steps() >= 1));
                assert_eq!(segs.last().unwrap().end, traj.len());
            }
        }
    }

    #[test]
    fn single_step_at_reset() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let profile = StageProfile::for_spec(&spec);
        let s = reset(&spec, 0);
        let tr = step(&s, &SimAction::hold(1.0), &spec).unwrap();
        let traj = Trajectory { task: spec.kind, episode: 0, transitions: vec![tr] };
        let segs = segment(&traj, &spec, &profile).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].stage, segs[0].steps(), segs[0].completed), (StageId::Reach, 1, false));
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let spec = TaskSpec::new(TaskKind::Push);
        let traj = Trajectory { task: spec.kind, episode: 0, transitions: vec![] };
        assert!(matches!(segment(&traj, &spec, &StageProfile::for_spec(&spec)), Err(Error::Empty(_))));
    }

    #[test]
    fn injected_boundaries_are_exact() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let profile = StageProfile::for_spec(&spec);
        let base = reset(&spec, 0);
        let state_at = |t: usize| {
            let mut s = base.clone();
            s.t = t;
            s.flags.reached = t >= 10;
            s.flags.grasped = t >= 10;
            s.flags.lifted = t >= 18;
            s.flags.at_target = t >= 30;
            s
        };
        let transitions = (0..40)
            .map(|t| Transition {
                state: state_at(t),
                action: SimAction::hold(0.0),
                reward: 0.0,
                next_state: state_at(t + 1),
                done: t == 39,
            })
            .collect();
        let traj = Trajectory { task: spec.kind, episode: 0, transitions };
        let segs = segment(&traj, &spec, &profile).unwrap();
        let bounds: Vec<_> = segs.iter().map(|s| (s.stage, s.start, s.end, s.completed)).collect();
        assert_eq!(
            bounds,
            vec![
                (StageId::Reach, 0, 10, true),
                (StageId::Grasp, 10, 18, true),
                (StageId::Transport, 18, 30, true),
                (StageId::Place, 30, 40, false),
            ]
        );
    }

    #[test]
    fn regression_is_a_contract_violation() {
        let spec = TaskSpec::new(TaskKind::Push);
        let a = reset(&spec, 0);
        let mut b = a.clone();
        b.flags.reached = true;
        let tr = |s: &SimState, n: &SimState| Transition { state: s.clone(), action: SimAction::hold(1.0), reward: 0.0, next_state: n.clone(), done: false };
        let traj = Trajectory { task: spec.kind, episode: 0, transitions: vec![tr(&b, &a), tr(&a, &a)] };
        assert!(matches!(segment(&traj, &spec, &StageProfile::for_spec(&spec)), Err(Error::Contract(_))));
    }

    #[test]
    fn stage_cost_examples() {
        let spec = TaskSpec::new(TaskKind::LiftPegUpright);
        let base = reset(&spec, 0);
        let mut reach = Vec::new();
        for d in [0.10, 0.06, 0.02] {
            let mut s = base.clone();
            s.ee_pos = s.obj_pos + Vec3::new(0.0, d, 0.0);
            reach.push(s);
        }
        assert!((stage_cost(&reach, StageId::Reach, &spec).unwrap() - 0.06).abs() < 1e-15);

        let mut on = base.clone();
        on.ee_pos = on.obj_pos;
        assert_eq!(stage_cost([&on, &on], StageId::Reach, &spec).unwrap(), 0.0);

        let mut tilted = base.clone();
        tilted.obj_rot = axis_angle_to_rotation(Vec3::new(0.0, 1.0, 0.0), 0.3).unwrap().compose(&spec.upright);
        let c = stage_cost([&tilted, &tilted, &tilted], StageId::Upright, &spec).unwrap();
        assert!((c - 0.3).abs() < 1e-9);
        assert!(matches!(stage_cost(std::iter::empty(), StageId::Reach, &spec), Err(Error::Empty(_))));
    }

    #[test]
    fn miss_grasp_ends_early() {
        for kind in [TaskKind::PickPlace, TaskKind::LiftPegUpright] {
            let spec = TaskSpec::new(kind);
            let profile = StageProfile::for_spec(&spec);
            for ep in 0..10 {
                let traj = rollout(&spec, ep, |s| corrupt_expert(s, &spec, FailureMode::MissGrasp).unwrap()).unwrap();
                let last = segment(&traj, &spec, &profile).unwrap().pop().unwrap();
                assert!(matches!(last.stage, StageId::Reach | StageId::Grasp));
                assert!(!last.completed);
            }
        }
    }

    #[test]
    fn expert_reach_costs_less_than_stalled_reach() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            let profile = StageProfile::for_spec(&spec);
            for ep in 0..10 {
                let good = rollout(&spec, ep, |s| scripted_expert(s, &spec)).unwrap();
                let bad = rollout(&spec, ep, |s| corrupt_expert(s, &spec, FailureMode::StallAt(StageId::Reach)).unwrap()).unwrap();
                let g = &segment(&good, &spec, &profile).unwrap()[0];
                let b = &segment(&bad, &spec, &profile).unwrap()[0];
                assert!(g.completed && !b.completed);
                assert!(g.cost_raw < b.cost_raw);
            }
        }
    }
}
