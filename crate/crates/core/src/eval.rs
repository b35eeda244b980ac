//! Evaluation protocol: greedy rollouts, success and grasp rates, and
//! conditional stage success.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::{observe, rollout, SimAction, SimState, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::nn::GaussianPolicy;
use crate::par::{map_indexed, Exec};
use crate::seeding::derive_seed;
use crate::stare::{stage_of, StageId, StageProfile};

/// Default evaluation budget per trained model.
pub const EVAL_EPISODES: usize = 300;

/// Per-episode record used for every aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLedger {
    pub episode: u64,
    /// `completed[k]`: stage `k` was left for a later stage (or success).
    pub completed: Vec<bool>,
    pub grasped: bool,
    pub success: bool,
    pub length: usize,
}

impl EpisodeLedger {
    pub fn from_trajectory(traj: &Trajectory, spec: &TaskSpec, profile: &StageProfile) -> Result<Self> {
        let last = traj.final_state().ok_or_else(|| Error::Empty(format!("episode {}", traj.episode)))?;
        let deepest = profile
            .index_of(stage_of(last, spec))
            .ok_or_else(|| Error::Contract("final stage outside task profile".into()))?;
        Ok(EpisodeLedger {
            episode: traj.episode,
            completed: (0..profile.num_stages()).map(|k| deepest > k).collect(),
            grasped: traj.transitions.iter().any(|t| t.next_state.flags.grasped),
            success: traj.succeeded(),
            length: traj.len(),
        })
    }
}

/// Conditional success of one stage, kept as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRate {
    pub stage: StageId,
    pub completed: u64,
    /// Episodes that completed the previous stage (all episodes for the first).
    pub eligible: u64,
    /// Percentage, or `None` when no episode was eligible.
    pub percent: Option<f64>,
}

/// `P(stage k completed | stage k−1 completed)` for each stage, by exact counting.
pub fn conditional_stage_success(ledgers: &[EpisodeLedger], stages: &[StageId]) -> Vec<StageRate> {
    let mut prev = ledgers.len() as u64;
    stages
        .iter()
        .enumerate()
        .map(|(k, &stage)| {
            let done = ledgers.iter().filter(|l| l.completed[k]).count() as u64;
            let rate = StageRate {
                stage,
                completed: done,
                eligible: prev,
                percent: (prev > 0).then(|| 100.0 * done as f64 / prev as f64),
            };
            prev = done;
            rate
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: u64,
    pub success_rate: f64,
    pub grasp_rate: f64,
    pub conditional: Vec<StageRate>,
    pub mean_length: f64,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn from_ledgers(ledgers: &[EpisodeLedger], stages: &[StageId], seeds: Vec<u64>) -> Result<Self> {
        if ledgers.is_empty() {
            return Err(Error::Empty("evaluation ledgers".into()));
        }
        let n = ledgers.len() as f64;
        let successes = ledgers.iter().filter(|l| l.success).count() as u64;
        Ok(EvalReport {
            episodes: ledgers.len(),
            successes,
            success_rate: 100.0 * successes as f64 / n,
            grasp_rate: 100.0 * ledgers.iter().filter(|l| l.grasped).count() as f64 / n,
            conditional: conditional_stage_success(ledgers, stages),
            mean_length: ledgers.iter().map(|l| l.length as f64).sum::<f64>() / n,
            seeds,
        })
    }

    /// The product of conditional fractions telescopes to the success
    /// fraction; checked exactly in integers.
    pub fn counting_identity_holds(&self) -> bool {
        let (mut num, mut den) = (1u128, 1u128);
        for r in &self.conditional {
            if r.eligible == 0 {
                return self.successes == 0;
            }
            num *= r.completed as u128;
            den *= r.eligible as u128;
        }
        num * self.episodes as u128 == self.successes as u128 * den
    }

    pub fn conditional_percent(&self, stage: StageId) -> Option<f64> {
        self.conditional.iter().find(|r| r.stage == stage).and_then(|r| r.percent)
    }
}

/// Greedy (mean) action of a policy.
pub fn greedy_action(policy: &GaussianPolicy, state: &SimState, spec: &TaskSpec) -> Result<SimAction> {
    let obs = Array2::from_shape_vec((1, crate::env::OBS_DIM), observe(state, spec).to_vec()).expect("row");
    let mean = policy.forward(&obs)?;
    Ok(SimAction::from_policy(mean.row(0).as_slice().expect("contiguous"), spec))
}

/// Roll out `episodes` evaluation episodes (ids `0..episodes`) with an arbitrary controller.
pub fn evaluate_with<F>(spec: &TaskSpec, episodes: usize, exec: Exec, controller: F) -> Result<Vec<EpisodeLedger>>
where
    F: Fn(&SimState) -> Result<SimAction> + Sync + Send,
{
    if episodes == 0 {
        return Err(Error::Precondition("evaluation needs at least one episode".into()));
    }
    let profile = StageProfile::for_spec(spec);
    let results = map_indexed(exec, episodes, |i| -> Result<EpisodeLedger> {
        let mut failure = None;
        let traj = rollout(spec, i as u64, |s| match controller(s) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                SimAction::hold(s.gripper)
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        EpisodeLedger::from_trajectory(&traj, spec, &profile)
    });
    results.into_iter().collect()
}

/// Greedy evaluation of a policy.
pub fn evaluate(policy: &GaussianPolicy, spec: &TaskSpec, episodes: usize, seeds: Vec<u64>, exec: Exec) -> Result<EvalReport> {
    let ledgers = evaluate_with(spec, episodes, exec, |s| greedy_action(policy, s, spec))?;
    EvalReport::from_ledgers(&ledgers, &StageProfile::for_spec(spec).stages, seeds)
}

/// Seed stream for sampled evaluation noise.
const SAMPLED_EVAL_STREAM: u64 = 0x5A3E;

/// Evaluation with actions sampled from the policy instead of its mean.
/// Each episode draws from its own stream, so results do not depend on `exec`.
pub fn evaluate_sampled(policy: &GaussianPolicy, spec: &TaskSpec, episodes: usize, seed: u64, exec: Exec) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Precondition("evaluation needs at least one episode".into()));
    }
    let profile = StageProfile::for_spec(spec);
    let results = map_indexed(exec, episodes, |i| -> Result<EpisodeLedger> {
        let mut rng = crate::seeding::rng_from(derive_seed(seed, SAMPLED_EVAL_STREAM), i as u64);
        let mut failure = None;
        let traj = rollout(spec, i as u64, |s| {
            let obs = Array2::from_shape_vec((1, crate::env::OBS_DIM), observe(s, spec).to_vec()).expect("row");
            match policy.sample(&obs, &mut rng) {
                Ok((a, _)) => SimAction::from_policy(a.row(0).as_slice().expect("contiguous"), spec),
                Err(e) => {
                    failure.get_or_insert(e);
                    SimAction::hold(s.gripper)
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        EpisodeLedger::from_trajectory(&traj, spec, &profile)
    });
    let ledgers: Vec<EpisodeLedger> = results.into_iter().collect::<Result<_>>()?;
    EvalReport::from_ledgers(&ledgers, &profile.stages, vec![seed])
}

/// Average of several reports (one per training seed).
pub fn mean_of(reports: &[EvalReport], pick: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = reports.iter().filter_map(pick).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{scripted_expert, TaskKind};
    use crate::geometry::Vec3;
    use crate::imitation::init_policy;
    use rand::Rng;

    #[test]
    fn expert_scores_full_marks() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let ledgers = evaluate_with(&spec, 300, Exec::Parallel, |s| Ok(scripted_expert(s, &spec))).unwrap();
        let r = EvalReport::from_ledgers(&ledgers, &StageProfile::for_spec(&spec).stages, vec![]).unwrap();
        assert_eq!((r.success_rate, r.grasp_rate), (100.0, 100.0));
        assert!(r.conditional.iter().all(|c| c.percent == Some(100.0)));
        assert!(r.counting_identity_holds());
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let r = evaluate(&init_policy(0, &[64, 64], -0.5), &spec, 300, vec![0], Exec::Parallel).unwrap();
        assert!(r.success_rate < 1.0);
        assert!(r.counting_identity_holds());
    }

    #[test]
    fn reaching_without_closing() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let ledgers = evaluate_with(&spec, 50, Exec::Sequential, |s| {
            let above = s.obj_pos + Vec3::new(0.0, 0.0, 0.5 * spec.object_size);
            Ok(SimAction::new(s.ee_pos.step_toward(above, spec.a_max), Vec3::ZERO, 1.0))
        })
        .unwrap();
        let r = EvalReport::from_ledgers(&ledgers, &StageProfile::for_spec(&spec).stages, vec![]).unwrap();
        let pct: Vec<_> = r.conditional.iter().map(|c| c.percent).collect();
        assert_eq!(pct, vec![Some(100.0), Some(0.0), None, None]);
        assert_eq!(r.grasp_rate, 0.0);
    }

    #[test]
    fn counting_examples_and_brute_force_recount() {
        use StageId::*;
        let stages = [Reach, Grasp, Transport, Place];
        let mk = |depth: usize| EpisodeLedger {
            episode: 0,
            completed: (0..4).map(|k| depth > k).collect(),
            grasped: depth > 1,
            success: depth == 4,
            length: 1,
        };
        let ledgers: Vec<_> = [3, 3, 3, 2, 2, 2, 1, 1, 1, 1].iter().map(|&d| mk(d)).collect();
        let pct: Vec<_> = conditional_stage_success(&ledgers, &stages).iter().map(|r| r.percent).collect();
        assert_eq!(pct, vec![Some(100.0), Some(60.0), Some(50.0), Some(0.0)]);

        let mut rng = crate::seeding::rng_from(0, 0);
        for _ in 0..300 {
            let n = rng.random_range(1..40);
            let ledgers: Vec<_> = (0..n).map(|_| mk(rng.random_range(0..=4))).collect();
            let rates = conditional_stage_success(&ledgers, &stages);
            for (k, r) in rates.iter().enumerate() {
                let num = ledgers.iter().filter(|l| l.completed[k]).count() as u64;
                let den = if k == 0 { n as u64 } else { ledgers.iter().filter(|l| l.completed[k - 1]).count() as u64 };
                assert_eq!((r.completed, r.eligible), (num, den));
            }
            let report = EvalReport::from_ledgers(&ledgers, &stages, vec![]).unwrap();
            assert!(report.counting_identity_holds());
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let spec = TaskSpec::new(TaskKind::LiftPegUpright);
        let p = init_policy(3, &[16], -0.5);
        let a = evaluate(&p, &spec, 40, vec![], Exec::Sequential).unwrap();
        let b = evaluate(&p, &spec, 40, vec![], Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let a = evaluate_sampled(&p, &spec, 40, 9, Exec::Sequential).unwrap();
        let b = evaluate_sampled(&p, &spec, 40, 9, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.counting_identity_holds());
    }
}
