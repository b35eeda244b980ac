//! Stand-alone re-derivation of stage labels, deviations, scales,
//! potentials, segment costs and shaped rewards. Written straight from the
//! formulas; it only borrows the data types, never the stage code.

use stare_core::env::{SimState, TaskKind, TaskSpec, Trajectory};

/// The eight stage families; push and pull share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Reach,
    Grasp,
    Transport,
    Place,
    PushPull,
    Goal,
    Lift,
    Upright,
}

pub const ALL_FAMILIES: [Family; 8] =
    [Family::Reach, Family::Grasp, Family::Transport, Family::Place, Family::PushPull, Family::Goal, Family::Lift, Family::Upright];

/// Stage order of a task as (family, label) pairs.
pub fn task_stages(kind: TaskKind) -> Vec<(Family, &'static str)> {
    use Family::*;
    match kind {
        TaskKind::PickPlace => vec![(Reach, "reach"), (Grasp, "grasp"), (Transport, "transport"), (Place, "place")],
        TaskKind::LiftPegUpright => vec![(Reach, "reach"), (Grasp, "grasp"), (Lift, "lift"), (Upright, "upright")],
        TaskKind::Push => vec![(Reach, "reach"), (PushPull, "push"), (Goal, "goal")],
        TaskKind::Pull => vec![(Reach, "reach"), (PushPull, "pull"), (Goal, "goal")],
    }
}

/// Stage index of a state, `None` once the task has succeeded.
pub fn label(s: &SimState, kind: TaskKind) -> Option<usize> {
    if s.success {
        return None;
    }
    let f = &s.flags;
    let k = match kind {
        TaskKind::Push | TaskKind::Pull => [f.reached, f.at_target].iter().filter(|&&b| b).count(),
        _ => [f.reached, f.lifted, f.at_target].iter().filter(|&&b| b).count(),
    };
    Some(k)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn p(v: stare_core::geometry::Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Rotation angle of `aᵀb`, from its trace.
fn angle_between(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let mut trace = 0.0;
    for k in 0..3 {
        // (aᵀb)_kk = Σ_i a_ik b_ik
        trace += a[0][k] * b[0][k] + a[1][k] * b[1][k] + a[2][k] * b[2][k];
    }
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn deviation(s: &SimState, fam: Family, spec: &TaskSpec) -> f64 {
    match fam {
        Family::Reach | Family::Grasp => dist(p(s.ee_pos), p(s.obj_pos)),
        Family::Transport | Family::Place | Family::PushPull | Family::Goal => dist(p(s.obj_pos), p(s.goal_pos)),
        Family::Lift => (s.obj_pos.z - spec.lift_goal).abs(),
        Family::Upright => angle_between(s.obj_rot.rows(), spec.upright.rows()),
    }
}

pub fn scale(s: &SimState, fam: Family, spec: &TaskSpec) -> f64 {
    match fam {
        Family::Reach | Family::Grasp | Family::Place | Family::Goal => spec.object_size,
        Family::Transport | Family::PushPull => dist(p(s.obj_init), p(s.goal_pos)).max(spec.object_size),
        Family::Lift => spec.lift_goal - spec.table_height,
        Family::Upright => std::f64::consts::PI,
    }
}

pub fn family_potential(s: &SimState, fam: Family, spec: &TaskSpec) -> f64 {
    let z = 1.0 - deviation(s, fam, spec) / scale(s, fam, spec);
    1.0 / (1.0 + (-z).exp())
}

/// Composite potential, zero after success.
pub fn potential(s: &SimState, spec: &TaskSpec) -> f64 {
    match label(s, spec.kind) {
        None => 0.0,
        Some(k) => family_potential(s, task_stages(spec.kind)[k].0, spec),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub stage: &'static str,
    pub start: usize,
    pub end: usize,
    pub cost_raw: f64,
    pub cost_normalized: f64,
    pub completed: bool,
}

pub fn segments(traj: &Trajectory, spec: &TaskSpec) -> Vec<Segment> {
    let stages = task_stages(spec.kind);
    let done = stages.len();
    let labels: Vec<usize> = traj.transitions.iter().map(|t| label(&t.state, spec.kind).unwrap_or(done)).collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < labels.len() {
        let k = labels[start];
        let mut end = start;
        while end < labels.len() && labels[end] == k {
            end += 1;
        }
        let next = if end < labels.len() {
            labels[end]
        } else {
            label(&traj.transitions[end - 1].next_state, spec.kind).unwrap_or(done)
        };
        let (fam, name) = stages[k];
        let total: f64 = traj.transitions[start..end].iter().map(|t| deviation(&t.state, fam, spec)).sum();
        let raw = total / (end - start) as f64;
        out.push(Segment {
            stage: name,
            start,
            end,
            cost_raw: raw,
            cost_normalized: raw / scale(&traj.transitions[start].state, fam, spec),
            completed: next > k,
        });
        start = end;
    }
    out
}

/// `r + γΦ(s') − Φ(s)` for every step.
pub fn shaped_rewards(traj: &Trajectory, spec: &TaskSpec, gamma: f64) -> Vec<f64> {
    traj.transitions.iter().map(|t| t.reward + gamma * potential(&t.next_state, spec) - potential(&t.state, spec)).collect()
}
