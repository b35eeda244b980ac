//! Tabular check that stage-potential shaping leaves optimal behavior alone.
//!
//! A 1-D reach, grasp and carry chain is solved exactly by value iteration
//! with and without shaping, and the greedy action sets are compared state by
//! state.

use rand::Rng;
use serde::Serialize;

use crate::env::{Flags, SimState, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};
use crate::seeding::rng_from;
use crate::stare::potential;

/// Value-iteration stopping threshold used by the invariance check.
pub const ORACLE_TOL: f64 = 1e-10;
/// Two actions tie when their Q-values differ by less than this.
pub const TIE_TOL: f64 = 1e-7;
pub const RANDOM_POTENTIALS: usize = 20;
pub const CHAIN_BINS: usize = 200;

/// Finite deterministic MDP. Terminal states are absorbing with zero reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn num_states(&self) -> usize {
        self.next.len()
    }

    pub fn num_actions(&self) -> usize {
        self.next.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.num_states(), self.num_actions());
        if n == 0 || m == 0 {
            return Err(Error::Empty("tabular MDP".into()));
        }
        if self.reward.len() != n || self.terminal.len() != n {
            return Err(Error::Shape("transition, reward and terminal tables disagree".into()));
        }
        for s in 0..n {
            if self.next[s].len() != m || self.reward[s].len() != m {
                return Err(Error::Shape(format!("state {s} has a ragged action row")));
            }
            if let Some(&bad) = self.next[s].iter().find(|&&t| t >= n) {
                return Err(Error::Shape(format!("state {s} transitions to {bad}, outside {n} states")));
            }
            if self.terminal[s] && (self.next[s].iter().any(|&t| t != s) || self.reward[s].iter().any(|&r| r != 0.0)) {
                return Err(Error::Contract(format!("terminal state {s} is not absorbing with zero reward")));
            }
        }
        Ok(())
    }

    fn q(&self, v: &[f64], s: usize, a: usize) -> f64 {
        if self.terminal[s] {
            0.0
        } else {
            self.reward[s][a] + self.gamma * v[self.next[s][a]]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Greedy action per state, ties broken toward the lowest index.
    pub policy: Vec<usize>,
    /// Sup-norm change of every sweep.
    pub residuals: Vec<f64>,
}

impl Solution {
    pub fn q(&self, mdp: &TabularMdp, s: usize, a: usize) -> f64 {
        mdp.q(&self.values, s, a)
    }

    /// Actions within [`TIE_TOL`] of the best Q-value.
    pub fn greedy_set(&self, mdp: &TabularMdp, s: usize) -> Vec<usize> {
        let qs: Vec<f64> = (0..mdp.num_actions()).map(|a| self.q(mdp, s, a)).collect();
        let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..qs.len()).filter(|&a| qs[a] >= best - TIE_TOL).collect()
    }
}

/// Synchronous value iteration until the sup-norm change drops below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<Solution> {
    if !(tol > 0.0) {
        return Err(Error::Precondition(format!("value iteration tolerance must be positive, got {tol}")));
    }
    mdp.validate()?;
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; n];
    let mut residuals = Vec::new();
    loop {
        let nv: Vec<f64> = (0..n).map(|s| (0..m).map(|a| mdp.q(&v, s, a)).fold(f64::NEG_INFINITY, f64::max)).collect();
        let diff = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = nv;
        residuals.push(diff);
        if diff < tol {
            break;
        }
    }
    let policy = (0..n)
        .map(|s| {
            let mut best = 0;
            for a in 1..m {
                if mdp.q(&v, s, a) > mdp.q(&v, s, best) {
                    best = a;
                }
            }
            best
        })
        .collect();
    Ok(Solution { values: v, policy, residuals })
}

/// Rewrite rewards as `r + γΦ(s') − Φ(s)`. Terminal potentials must be zero.
pub fn shaped_mdp(mdp: &TabularMdp, phi: &[f64]) -> Result<TabularMdp> {
    if phi.len() != mdp.num_states() {
        return Err(Error::Shape(format!("{} potentials for {} states", phi.len(), mdp.num_states())));
    }
    if let Some(s) = (0..phi.len()).find(|&s| !phi[s].is_finite()) {
        return Err(Error::Numerical(format!("potential of state {s} is {}", phi[s])));
    }
    if let Some(s) = (0..phi.len()).find(|&s| mdp.terminal[s] && phi[s] != 0.0) {
        return Err(Error::Precondition(format!("terminal state {s} has potential {}", phi[s])));
    }
    let mut out = mdp.clone();
    for s in 0..mdp.num_states() {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..mdp.num_actions() {
            out.reward[s][a] += mdp.gamma * phi[mdp.next[s][a]] - phi[s];
        }
    }
    Ok(out)
}

/// Actions of the reach-and-grasp chain.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const CLOSE: usize = 2;
pub const NOOP: usize = 3;

/// Gripper moving along a line of bins. Closing at the object bin grasps;
/// closing again at the goal bin while holding releases the object there,
/// which is the only rewarded (terminal) transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachGraspChain {
    pub bins: usize,
    pub object_bin: usize,
    pub goal_bin: usize,
    pub spec: TaskSpec,
    pub mdp: TabularMdp,
}

impl ReachGraspChain {
    pub fn new(bins: usize, object_bin: usize, goal_bin: usize, gamma: f64) -> Result<Self> {
        if bins < 2 || object_bin >= bins || goal_bin >= bins || object_bin == goal_bin {
            return Err(Error::Precondition(format!("chain of {bins} bins with object {object_bin}, goal {goal_bin}")));
        }
        let n = 2 * bins + 1;
        let term = n - 1;
        let mut next = vec![vec![term; 4]; n];
        let mut reward = vec![vec![0.0; 4]; n];
        let mut terminal = vec![false; n];
        terminal[term] = true;
        for i in 0..bins {
            for g in 0..2 {
                let s = 2 * i + g;
                next[s][LEFT] = 2 * i.saturating_sub(1) + g;
                next[s][RIGHT] = 2 * (i + 1).min(bins - 1) + g;
                next[s][NOOP] = s;
                next[s][CLOSE] = match (g, i) {
                    (0, i) if i == object_bin => 2 * i + 1,
                    (1, i) if i == goal_bin => {
                        reward[s][CLOSE] = 1.0;
                        term
                    }
                    _ => s,
                };
            }
        }
        let mdp = TabularMdp { next, reward, terminal, gamma };
        mdp.validate()?;
        Ok(ReachGraspChain { bins, object_bin, goal_bin, spec: TaskSpec::new(TaskKind::PickPlace), mdp })
    }

    /// Default instance used by the invariance check.
    pub fn standard() -> Self {
        Self::new(CHAIN_BINS, 60, 150, 0.99).expect("valid chain")
    }

    pub fn terminal_state(&self) -> usize {
        2 * self.bins
    }

    /// Bin center along the workspace x extent.
    pub fn bin_x(&self, i: usize) -> f64 {
        let (lo, hi) = (self.spec.workspace.min.x, self.spec.workspace.max.x);
        lo + (i as f64 + 0.5) * (hi - lo) / self.bins as f64
    }

    /// Simulator state corresponding to a non-terminal tabular state.
    pub fn sim_state(&self, s: usize) -> SimState {
        let (i, grasped) = (s / 2, s % 2 == 1);
        let z = self.spec.table_height;
        let ee = Vec3::new(self.bin_x(i), 0.0, z);
        let obj_init = Vec3::new(self.bin_x(self.object_bin), 0.0, z);
        let goal = Vec3::new(self.bin_x(self.goal_bin), 0.0, z);
        let obj = if grasped { ee } else { obj_init };
        let l = self.spec.object_size;
        SimState {
            t: 0,
            ee_pos: ee,
            ee_rot: Rotation::IDENTITY,
            gripper: if grasped { 0.0 } else { 1.0 },
            obj_pos: obj,
            obj_rot: Rotation::IDENTITY,
            obj_init,
            goal_pos: goal,
            flags: Flags {
                grasped,
                lifted: grasped,
                contact: grasped,
                reached: grasped || ee.distance(obj_init) <= l,
                at_target: grasped && obj.distance(goal) <= l,
                released_stable_count: 0,
            },
            terminal: false,
            success: false,
        }
    }

    /// The composite stage potential on every state, zero at the terminal.
    pub fn stage_potential(&self) -> Vec<f64> {
        let mut phi: Vec<f64> = (0..2 * self.bins).map(|s| potential(&self.sim_state(s), &self.spec)).collect();
        phi.push(0.0);
        phi
    }

    /// Uniform random potential in `[-1, 1]`, zero at the terminal.
    pub fn random_potential(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, 0x0AC1E);
        let mut phi: Vec<f64> = (0..2 * self.bins).map(|_| rng.random_range(-1.0..=1.0)).collect();
        phi.push(0.0);
        phi
    }
}

/// Outcome of one shaped-vs-sparse comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceCheck {
    pub name: String,
    /// States whose greedy-optimal action sets differ.
    pub mismatched_states: usize,
    /// Largest `|Q'(s,a) − (Q(s,a) − Φ(s))|` over non-terminal states and actions.
    pub max_q_discrepancy: f64,
    /// Largest `|V'(s) − (V(s) − Φ(s))|`.
    pub max_value_shift_error: f64,
}

impl InvarianceCheck {
    pub fn passed(&self, value_tol: f64) -> bool {
        self.mismatched_states == 0 && self.max_value_shift_error <= value_tol
    }
}

/// Compare greedy action sets and values of `mdp` against its shaped version.
pub fn check_invariance(name: &str, mdp: &TabularMdp, base: &Solution, phi: &[f64], tol: f64) -> Result<InvarianceCheck> {
    let shaped = shaped_mdp(mdp, phi)?;
    let sol = value_iteration(&shaped, tol)?;
    let mut check = InvarianceCheck { name: name.into(), mismatched_states: 0, max_q_discrepancy: 0.0, max_value_shift_error: 0.0 };
    for s in 0..mdp.num_states() {
        check.max_value_shift_error = check.max_value_shift_error.max((sol.values[s] - (base.values[s] - phi[s])).abs());
        if mdp.terminal[s] {
            continue;
        }
        if sol.greedy_set(&shaped, s) != base.greedy_set(mdp, s) {
            check.mismatched_states += 1;
        }
        for a in 0..mdp.num_actions() {
            let d = (sol.q(&shaped, s, a) - (base.q(mdp, s, a) - phi[s])).abs();
            check.max_q_discrepancy = check.max_q_discrepancy.max(d);
        }
    }
    Ok(check)
}

/// All invariance checks on the standard chain: random potentials, then the
/// stage potential.
pub fn run_oracle(tol: f64) -> Result<Vec<InvarianceCheck>> {
    let chain = ReachGraspChain::standard();
    let base = value_iteration(&chain.mdp, tol)?;
    let mut out = Vec::with_capacity(RANDOM_POTENTIALS + 1);
    for k in 0..RANDOM_POTENTIALS {
        out.push(check_invariance(&format!("random_{k}"), &chain.mdp, &base, &chain.random_potential(k as u64), tol)?);
    }
    out.push(check_invariance("stage_potential", &chain.mdp, &base, &chain.stage_potential(), tol)?);
    Ok(out)
}

/// Tolerance for the value-shift identity `V' = V − Φ`.
pub fn value_shift_tol(tol: f64) -> f64 {
    10.0 * tol
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> TabularMdp {
        // 0 → 1 → 2 (terminal); reaching 2 pays 1.
        TabularMdp {
            next: vec![vec![1], vec![2], vec![2]],
            reward: vec![vec![0.0], vec![1.0], vec![0.0]],
            terminal: vec![false, false, true],
            gamma: 0.9,
        }
    }

    #[test]
    fn three_state_chain() {
        // Rewards count on the transition that earns them, so V(1) = 1 and
        // V(0) = γ. Discounting the reward by one more step, as when it is
        // credited on arrival, scales every value by γ: (0.81, 0.9, 0).
        let sol = value_iteration(&chain3(), 1e-10).unwrap();
        let arrival: Vec<f64> = sol.values.iter().map(|v| 0.9 * v).collect();
        for (got, want) in arrival.iter().zip([0.81, 0.9, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(sol.policy, vec![0, 0, 0]);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mut m = ReachGraspChain::new(20, 3, 15, 0.9).unwrap().mdp;
        m.reward.iter_mut().for_each(|r| r.fill(0.0));
        assert!(value_iteration(&m, 1e-10).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residuals_contract() {
        let chain = ReachGraspChain::standard();
        let phi = chain.random_potential(3);
        let sol = value_iteration(&shaped_mdp(&chain.mdp, &phi).unwrap(), 1e-10).unwrap();
        for w in sol.residuals.windows(2) {
            assert!(w[1] <= chain.mdp.gamma * w[0] + 1e-15);
        }
    }

    #[test]
    fn shaping_arithmetic() {
        let chain = ReachGraspChain::new(20, 3, 15, 0.9).unwrap();
        let zero = vec![0.0; chain.mdp.num_states()];
        assert_eq!(shaped_mdp(&chain.mdp, &zero).unwrap(), chain.mdp);
        let mut c = vec![0.4; chain.mdp.num_states()];
        *c.last_mut().unwrap() = 0.0;
        let s = shaped_mdp(&chain.mdp, &c).unwrap();
        for st in 0..chain.mdp.num_states() - 1 {
            for a in 0..4 {
                let into_terminal = chain.mdp.next[st][a] == chain.terminal_state();
                let shift = if into_terminal { -0.4 } else { (0.9 - 1.0) * 0.4 };
                assert!((s.reward[st][a] - chain.mdp.reward[st][a] - shift).abs() < 1e-15);
            }
        }
        let mut bad = zero.clone();
        *bad.last_mut().unwrap() = 0.1;
        assert!(matches!(shaped_mdp(&chain.mdp, &bad), Err(Error::Precondition(_))));
        assert!(matches!(value_iteration(&chain.mdp, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn stage_potential_spans_stages_inside_the_grid() {
        use crate::stare::{stage_of, StageId};
        let chain = ReachGraspChain::standard();
        let phi = chain.stage_potential();
        assert!(phi[..phi.len() - 1].iter().all(|&p| p > 0.0 && p < 1.0));
        let stages: std::collections::BTreeSet<StageId> =
            (0..2 * chain.bins).map(|s| stage_of(&chain.sim_state(s), &chain.spec)).collect();
        assert_eq!(stages.len(), 4);
    }

    #[test]
    fn greedy_policy_reaches_grasps_and_carries() {
        let chain = ReachGraspChain::new(40, 10, 30, 0.95).unwrap();
        let sol = value_iteration(&chain.mdp, 1e-12).unwrap();
        let mut s = 2 * 35;
        let mut steps = 0;
        while s != chain.terminal_state() {
            s = chain.mdp.next[s][sol.policy[s]];
            steps += 1;
            assert!(steps < 100);
        }
        // 25 moves left, close, 20 moves right, release.
        assert_eq!(steps, 25 + 1 + 20 + 1);
    }

    #[test]
    fn invariance_holds() {
        let tol = ORACLE_TOL;
        for c in run_oracle(tol).unwrap() {
            assert!(c.passed(value_shift_tol(tol)), "{c:?}");
        }
    }
}
