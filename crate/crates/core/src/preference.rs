//! Trajectory preference optimization, whole-trajectory and stage-wise.
//!
//! Scores are mean per-step log-ratios between the trained policy and a
//! frozen reference. The stage-wise loss compares matching stage segments
//! of a chosen and a rejected trajectory, each penalized by its normalized
//! stage cost.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::log_logistic;
use crate::imitation::transition_batch;
use crate::nn::{Adam, Checkpoint, GaussianPolicy, RngState, Tape};
use crate::stare::{penalized_score, segment, StageId, StageProfile, StageSegment};

pub const DEFAULT_BETA: f64 = 0.1;
const TPO_STREAM: u64 = 0x7B0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub episode: u64,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub chosen_segments: Vec<StageSegment>,
    pub rejected_segments: Vec<StageSegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageScore {
    pub stage: StageId,
    pub q: f64,
    pub cost: f64,
    pub q_hat: f64,
}

/// Number of leading stages a trajectory completed.
fn completed_prefix(segs: &[StageSegment]) -> usize {
    segs.iter().take_while(|s| s.completed).count()
}

/// Stages compared for a pair: the first `m` stages, where `m − 1` is the
/// deepest stage both trajectories completed. Stages absent from either
/// segmentation (skipped within a single step) are dropped.
pub fn eligible_stages(chosen: &[StageSegment], rejected: &[StageSegment], num_stages: usize) -> Vec<(usize, usize)> {
    let m = (completed_prefix(chosen).min(completed_prefix(rejected)) + 1).min(num_stages);
    let mut out = Vec::new();
    for (ci, c) in chosen.iter().enumerate().take(m) {
        if let Some(ri) = rejected.iter().position(|r| r.stage == c.stage) {
            if ri < m {
                out.push((ci, ri));
            }
        }
    }
    out
}

/// Whole-trajectory segmentation (a single pseudo-stage, cost 0).
pub fn whole_trajectory_segment(traj: &Trajectory) -> Vec<StageSegment> {
    vec![StageSegment {
        stage: StageId::Done,
        start: 0,
        end: traj.len(),
        cost_raw: 0.0,
        cost_normalized: 0.0,
        completed: traj.succeeded(),
    }]
}

fn total_cost(segs: &[StageSegment]) -> f64 {
    segs.iter().map(|s| s.cost_normalized).sum()
}

/// Pair trajectories sharing an episode seed. A failure paired with a success
/// always loses; two successes are ordered by total normalized stage cost
/// (equal costs yield no pair).
pub fn build_pairs(successes: &[Trajectory], failures: &[Trajectory], spec: &TaskSpec, profile: &StageProfile) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for f in failures {
        let Some(s) = successes.iter().find(|s| s.episode == f.episode) else { continue };
        let (ss, fs) = (segment(s, spec, profile)?, segment(f, spec, profile)?);
        let (chosen, rejected, cs, rs) = if !s.succeeded() {
            continue;
        } else if !f.succeeded() {
            (s, f, ss, fs)
        } else {
            let (a, b) = (total_cost(&ss), total_cost(&fs));
            if a < b {
                (s, f, ss, fs)
            } else if b < a {
                (f, s, fs, ss)
            } else {
                continue;
            }
        };
        pairs.push(PreferencePair {
            episode: f.episode,
            chosen: chosen.clone(),
            rejected: rejected.clone(),
            chosen_segments: cs,
            rejected_segments: rs,
        });
    }
    Ok(pairs)
}

/// Reference log-probabilities of every step of both trajectories of each pair.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    pub chosen: Vec<Array2<f64>>,
    pub rejected: Vec<Array2<f64>>,
}

impl ReferenceCache {
    pub fn new(reference: &GaussianPolicy, pairs: &[PreferencePair], spec: &TaskSpec) -> Result<Self> {
        let lp = |t: &Trajectory| {
            let (o, a) = transition_batch(&t.transitions, spec);
            reference.log_prob(&o, &a)
        };
        Ok(ReferenceCache {
            chosen: pairs.iter().map(|p| lp(&p.chosen)).collect::<Result<_>>()?,
            rejected: pairs.iter().map(|p| lp(&p.rejected)).collect::<Result<_>>()?,
        })
    }
}

/// Mean log-ratio over `[start, end)` given per-step log-probs of both policies.
pub fn trajectory_score_q(policy_lp: &Array2<f64>, reference_lp: &Array2<f64>, start: usize, end: usize) -> Result<f64> {
    if end <= start || end > policy_lp.nrows() || policy_lp.dim() != reference_lp.dim() {
        return Err(Error::Empty(format!("segment [{start}, {end}) of a {}-step trajectory", policy_lp.nrows())));
    }
    let n = (end - start) as f64;
    Ok((start..end).map(|t| policy_lp[[t, 0]] - reference_lp[[t, 0]]).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLossConfig {
    pub beta: f64,
    pub lambda: f64,
    /// Compare stage segments (true) or whole trajectories (false).
    pub stagewise: bool,
}

impl PreferenceLossConfig {
    pub fn tpo(beta: f64) -> Self {
        PreferenceLossConfig { beta, lambda: 0.0, stagewise: false }
    }

    pub fn sta_tpo(beta: f64, lambda: f64) -> Self {
        PreferenceLossConfig { beta, lambda, stagewise: true }
    }
}

/// Per-term bookkeeping of a preference loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceEval {
    pub loss: f64,
    pub grads: Vec<Option<Array2<f64>>>,
    /// Pairs dropped because no stage was eligible.
    pub skipped: usize,
    /// `(stage, q̂⁺ − q̂⁻)` for every included term.
    pub gaps: Vec<(StageId, f64)>,
}

struct Term {
    weights: Vec<(usize, f64)>,
    cost_gap: f64,
    stage: StageId,
    weight: f64,
}

fn pair_segments<'a>(pair: &'a PreferencePair, cfg: &PreferenceLossConfig) -> (std::borrow::Cow<'a, [StageSegment]>, std::borrow::Cow<'a, [StageSegment]>) {
    if cfg.stagewise {
        (pair.chosen_segments.as_slice().into(), pair.rejected_segments.as_slice().into())
    } else {
        (whole_trajectory_segment(&pair.chosen).into(), whole_trajectory_segment(&pair.rejected).into())
    }
}

/// Preference loss `−mean_pairs mean_k log σ(β(q̂⁺_k − q̂⁻_k))` and its gradient.
pub fn preference_loss(
    policy: &GaussianPolicy,
    pairs: &[PreferencePair],
    reference: &ReferenceCache,
    spec: &TaskSpec,
    num_stages: usize,
    cfg: &PreferenceLossConfig,
) -> Result<PreferenceEval> {
    // Stack every step of every trajectory into one batch.
    let mut obs_parts = Vec::new();
    let mut act_parts = Vec::new();
    let mut ref_parts = Vec::new();
    let mut offsets = Vec::new();
    let mut rows = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        for (traj, ref_lp) in [(&p.chosen, &reference.chosen[i]), (&p.rejected, &reference.rejected[i])] {
            let (o, a) = transition_batch(&traj.transitions, spec);
            offsets.push(rows);
            rows += o.nrows();
            obs_parts.push(o);
            act_parts.push(a);
            ref_parts.push(ref_lp.clone());
        }
    }

    let mut terms: Vec<Term> = Vec::new();
    let mut skipped = 0;
    let mut included = 0;
    let mut pair_terms: Vec<Vec<Term>> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let (cs, rs) = pair_segments(p, cfg);
        let k = if cfg.stagewise { num_stages } else { 1 };
        let elig = eligible_stages(&cs, &rs, k);
        if elig.is_empty() {
            skipped += 1;
            continue;
        }
        included += 1;
        let (oc, or) = (offsets[2 * i], offsets[2 * i + 1]);
        let mut these = Vec::new();
        for &(ci, ri) in &elig {
            let (c, r) = (&cs[ci], &rs[ri]);
            let mut w = Vec::new();
            let (tc, tr) = (c.steps() as f64, r.steps() as f64);
            w.extend((c.start..c.end).map(|t| (oc + t, 1.0 / tc)));
            w.extend((r.start..r.end).map(|t| (or + t, -1.0 / tr)));
            these.push(Term {
                weights: w,
                cost_gap: cfg.lambda * (c.cost_normalized - r.cost_normalized),
                stage: c.stage,
                weight: 1.0 / elig.len() as f64,
            });
        }
        pair_terms.push(these);
    }
    for t in pair_terms {
        terms.extend(t);
    }
    let n_slots = policy.num_slots();
    if included == 0 {
        return Ok(PreferenceEval { loss: 0.0, grads: vec![None; n_slots], skipped, gaps: Vec::new() });
    }

    let obs = ndarray::concatenate(Axis(0), &obs_parts.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let act = ndarray::concatenate(Axis(0), &act_parts.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let ref_lp = ndarray::concatenate(Axis(0), &ref_parts.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;

    let mut tape = Tape::new();
    let vars = policy.bind(&mut tape);
    let lp = policy.log_prob_tape(&mut tape, &vars, obs, act)?;
    let r = tape.constant(ref_lp);
    let ratio = tape.sub(lp, r)?;
    let q_gap = tape.combine(ratio, terms.iter().map(|t| t.weights.clone()).collect())?;
    let cost = tape.constant(Array2::from_shape_vec((terms.len(), 1), terms.iter().map(|t| t.cost_gap).collect()).expect("column"));
    let q_hat_gap = tape.sub(q_gap, cost)?;
    let z = tape.scale(q_hat_gap, cfg.beta);
    let ls = tape.log_sigmoid(z);
    let weights = vec![terms.iter().enumerate().map(|(j, t)| (j, -t.weight / included as f64)).collect()];
    let loss = tape.combine(ls, weights)?;
    let grads = tape.backward(loss, n_slots)?;
    let gaps = terms.iter().zip(tape.value(q_hat_gap).iter()).map(|(t, &g)| (t.stage, g)).collect();
    Ok(PreferenceEval { loss: tape.scalar(loss), grads, skipped, gaps })
}

/// Whole-trajectory preference loss value.
pub fn tpo_loss(policy: &GaussianPolicy, pairs: &[PreferencePair], reference: &ReferenceCache, spec: &TaskSpec, beta: f64) -> Result<f64> {
    Ok(preference_loss(policy, pairs, reference, spec, 1, &PreferenceLossConfig::tpo(beta))?.loss)
}

/// Stage-wise preference loss value.
pub fn sta_tpo_loss(
    policy: &GaussianPolicy,
    pairs: &[PreferencePair],
    reference: &ReferenceCache,
    spec: &TaskSpec,
    profile: &StageProfile,
    beta: f64,
) -> Result<f64> {
    let cfg = PreferenceLossConfig::sta_tpo(beta, profile.lambda);
    Ok(preference_loss(policy, pairs, reference, spec, profile.num_stages(), &cfg)?.loss)
}

/// Per-stage scores of one trajectory under `policy` relative to the reference.
pub fn stage_scores(
    policy: &GaussianPolicy,
    traj: &Trajectory,
    segs: &[StageSegment],
    reference_lp: &Array2<f64>,
    spec: &TaskSpec,
    lambda: f64,
) -> Result<Vec<StageScore>> {
    let (o, a) = transition_batch(&traj.transitions, spec);
    let lp = policy.log_prob(&o, &a)?;
    segs.iter()
        .map(|s| {
            let q = trajectory_score_q(&lp, reference_lp, s.start, s.end)?;
            Ok(StageScore { stage: s.stage, q, cost: s.cost_normalized, q_hat: penalized_score(q, s.cost_normalized, lambda) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpoConfig {
    pub steps: u64,
    pub batch_pairs: usize,
    pub lr: f64,
    pub loss: PreferenceLossConfig,
    pub seed: u64,
}

impl TpoConfig {
    pub fn new(stagewise: bool, seed: u64) -> Self {
        let loss = if stagewise {
            PreferenceLossConfig::sta_tpo(DEFAULT_BETA, crate::stare::DEFAULT_LAMBDA)
        } else {
            PreferenceLossConfig::tpo(DEFAULT_BETA)
        };
        TpoConfig { steps: 100, batch_pairs: 16, lr: 2e-5, loss, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpoRow {
    pub step: u64,
    pub loss: f64,
    pub skipped: usize,
    /// Mean q̂ gap per stage, in task stage order (`None` if absent from the batch).
    pub gaps: Vec<Option<f64>>,
}

/// Train against a frozen copy of `start.policy`.
pub fn train_tpo(start: Checkpoint, pairs: &[PreferencePair], spec: &TaskSpec, profile: &StageProfile, cfg: &TpoConfig) -> Result<(Checkpoint, Vec<TpoRow>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs".into()));
    }
    let reference = start.policy.clone();
    let cache = ReferenceCache::new(&reference, pairs, spec)?;
    let mut ck = start;
    ck.phase = if cfg.loss.stagewise { "sta_tpo" } else { "tpo" }.into();
    ck.step = 0;
    let mut rng = RngState { seed: cfg.seed, stream: TPO_STREAM, word_pos: 0 }.restore();
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_pairs.clamp(1, pairs.len());
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<PreferencePair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let sub = ReferenceCache {
            chosen: idx.iter().map(|&i| cache.chosen[i].clone()).collect(),
            rejected: idx.iter().map(|&i| cache.rejected[i].clone()).collect(),
        };
        let eval = preference_loss(&ck.policy, &batch, &sub, spec, profile.num_stages(), &cfg.loss)?;
        if !eval.loss.is_finite() {
            return Err(Error::Numerical(format!("preference loss {} at step {step}", eval.loss)));
        }
        opt.step(ck.policy.tensors_mut(), &eval.grads)?;
        ck.policy.clamp_log_std();
        ck.step = step;
        let gaps = profile
            .stages
            .iter()
            .map(|&s| {
                let v: Vec<f64> = eval.gaps.iter().filter(|g| g.0 == s).map(|g| g.1).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        log.push(TpoRow { step, loss: eval.loss, skipped: eval.skipped, gaps });
    }
    ck.policy_opt = Some(opt);
    ck.rng = Some(RngState::capture(cfg.seed, TPO_STREAM, &rng));
    Ok((ck, log))
}

/// Closed form of one preference term, `−log σ(β·gap)`.
pub fn pair_term(beta: f64, gap: f64) -> f64 {
    -log_logistic(beta * gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{corrupt_expert, rollout, scripted_expert, TaskKind};
    use crate::imitation::init_policy;
    use crate::nn::max_relative_error;
    use std::f64::consts::LN_2;

    fn pairs_for(kind: TaskKind, n: u64) -> (TaskSpec, StageProfile, Vec<PreferencePair>) {
        let spec = TaskSpec::new(kind);
        let profile = StageProfile::for_spec(&spec);
        let modes = crate::env::default_failure_modes(kind);
        let good: Vec<_> = (0..n).map(|ep| rollout(&spec, ep, |s| scripted_expert(s, &spec)).unwrap()).collect();
        let bad: Vec<_> = (0..n)
            .map(|ep| {
                let m = modes[ep as usize % modes.len()];
                rollout(&spec, ep, |s| corrupt_expert(s, &spec, m).unwrap()).unwrap()
            })
            .collect();
        let pairs = build_pairs(&good, &bad, &spec, &profile).unwrap();
        (spec, profile, pairs)
    }

    #[test]
    fn identical_policies_give_ln2() {
        let (spec, profile, pairs) = pairs_for(TaskKind::PickPlace, 8);
        assert_eq!(pairs.len(), 8);
        let p = init_policy(0, &[16], -0.5);
        let cache = ReferenceCache::new(&p, &pairs, &spec).unwrap();
        assert!((tpo_loss(&p, &pairs, &cache, &spec, 0.1).unwrap() - LN_2).abs() < 1e-12);
        let zero = profile.clone().with_lambda(0.0);
        assert!((sta_tpo_loss(&p, &pairs, &cache, &spec, &zero, 0.1).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_stage_without_penalty_equals_whole_trajectory_loss() {
        let (spec, _, mut pairs) = pairs_for(TaskKind::LiftPegUpright, 6);
        for p in pairs.iter_mut() {
            p.chosen_segments = whole_trajectory_segment(&p.chosen);
            p.rejected_segments = whole_trajectory_segment(&p.rejected);
        }
        let reference = init_policy(1, &[16], -0.5);
        let mut p = init_policy(2, &[16], -0.3);
        p.trunk.tensors[2].mapv_inplace(|v| v * 30.0);
        let cache = ReferenceCache::new(&reference, &pairs, &spec).unwrap();
        let a = tpo_loss(&p, &pairs, &cache, &spec, 0.1).unwrap();
        let b = preference_loss(&p, &pairs, &cache, &spec, 1, &PreferenceLossConfig::sta_tpo(0.1, 0.0)).unwrap().loss;
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        assert!((a - LN_2).abs() > 1e-6);
    }

    #[test]
    fn q_is_mean_log_ratio() {
        let lp = Array2::from_shape_vec((3, 1), vec![-1.0, -2.0, -3.0]).unwrap();
        let rf = Array2::from_shape_vec((3, 1), vec![-1.5, -2.0, -2.0]).unwrap();
        assert!((trajectory_score_q(&lp, &rf, 0, 3).unwrap() - (-0.5 / 3.0)).abs() < 1e-15);
        assert_eq!(trajectory_score_q(&lp, &rf, 0, 1).unwrap(), 0.5);
        assert_eq!(trajectory_score_q(&lp, &lp, 0, 3).unwrap(), 0.0);
        assert!(trajectory_score_q(&lp, &rf, 2, 2).is_err());
        // Repeating every step leaves the mean unchanged.
        let lp2 = Array2::from_shape_vec((6, 1), vec![-1.0, -1.0, -2.0, -2.0, -3.0, -3.0]).unwrap();
        let rf2 = Array2::from_shape_vec((6, 1), vec![-1.5, -1.5, -2.0, -2.0, -2.0, -2.0]).unwrap();
        assert!((trajectory_score_q(&lp2, &rf2, 0, 6).unwrap() - trajectory_score_q(&lp, &rf, 0, 3).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn eligible_stage_rule() {
        let seg = |stage, completed| StageSegment { stage, start: 0, end: 1, cost_raw: 0.0, cost_normalized: 0.0, completed };
        use StageId::*;
        let chosen = vec![seg(Reach, true), seg(Grasp, true), seg(Transport, true), seg(Place, true)];
        let failed_grasp = vec![seg(Reach, true), seg(Grasp, false)];
        assert_eq!(eligible_stages(&chosen, &failed_grasp, 4), vec![(0, 0), (1, 1)]);
        let failed_reach = vec![seg(Reach, false)];
        assert_eq!(eligible_stages(&chosen, &failed_reach, 4), vec![(0, 0)]);
        assert_eq!(eligible_stages(&chosen, &chosen, 4).len(), 4);
    }

    #[test]
    fn pairs_cover_failure_stages_and_rank_successes() {
        let (spec, profile, pairs) = pairs_for(TaskKind::PickPlace, 12);
        let mut last: Vec<StageId> = pairs.iter().map(|p| p.rejected_segments.last().unwrap().stage).collect();
        last.sort();
        last.dedup();
        assert_eq!(last, profile.stages);
        assert!(build_pairs(&[], &[], &spec, &profile).unwrap().is_empty());

        // Two successes on the same seed: the cheaper one is chosen.
        let good = rollout(&spec, 3, |s| scripted_expert(s, &spec)).unwrap();
        let mut slow_count = 0;
        let slow = rollout(&spec, 3, |s| {
            slow_count += 1;
            let mut a = scripted_expert(s, &spec);
            if slow_count <= 3 {
                a = crate::env::SimAction::hold(1.0);
            }
            a
        })
        .unwrap();
        assert!(slow.succeeded());
        let p = build_pairs(&[good.clone()], &[slow.clone()], &spec, &profile).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].chosen, good);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (spec, profile, pairs) = pairs_for(TaskKind::PickPlace, 4);
        let reference = init_policy(5, &[8, 8], -0.4);
        let mut p = init_policy(6, &[8, 8], -0.2);
        p.trunk.tensors[4].mapv_inplace(|v| v * 40.0);
        let cache = ReferenceCache::new(&reference, &pairs, &spec).unwrap();
        for cfg in [PreferenceLossConfig::tpo(0.5), PreferenceLossConfig::sta_tpo(0.5, 0.3)] {
            let eval = preference_loss(&p, &pairs, &cache, &spec, profile.num_stages(), &cfg).unwrap();
            let err = max_relative_error(
                &p,
                &eval.grads,
                1e-5,
                |q| Ok(preference_loss(q, &pairs, &cache, &spec, profile.num_stages(), &cfg)?.loss),
                |q, s, r, c, d| q.perturbed(s, r, c, d),
            )
            .unwrap();
            assert!(err < 1e-4, "{cfg:?}: {err}");
        }
    }

    #[test]
    fn antisymmetry_of_swapped_terms() {
        for x in [-3.0, -0.2, 0.0, 0.7, 5.0] {
            let s = pair_term(1.0, x) + pair_term(1.0, -x);
            assert!(s >= 2.0 * LN_2 - 1e-15);
            if x == 0.0 {
                assert!((s - 2.0 * LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn training_freezes_reference_and_separates_stages() {
        let (spec, profile, pairs) = pairs_for(TaskKind::PickPlace, 16);
        let start = Checkpoint::new("sft", init_policy(7, &[16, 16], -0.5));
        let frozen = start.policy.clone();
        let cfg = TpoConfig { steps: 40, batch_pairs: 8, lr: 3e-3, ..TpoConfig::new(true, 1) };
        let (out, log) = train_tpo(start.clone(), &pairs, &spec, &profile, &cfg).unwrap();
        assert_eq!(start.policy, frozen);
        assert!(log.last().unwrap().loss < log[0].loss);
        let zero = TpoConfig { steps: 0, ..cfg.clone() };
        assert_eq!(train_tpo(start.clone(), &pairs, &spec, &profile, &zero).unwrap().0.policy, frozen);
        let (again, _) = train_tpo(start, &pairs, &spec, &profile, &cfg).unwrap();
        assert_eq!(again, out);
    }
}
