//! Behavior cloning from scripted demonstrations.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{observe, TaskSpec, Trajectory, Transition, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{stack_rows, Adam, Checkpoint, GaussianPolicy, RngState, Tape};
use crate::seeding::derive_seed;

/// Translation and rotation magnitudes below which a step counts as idle.
pub const IDLE_TRANSLATION: f64 = 1e-4;
pub const IDLE_ROTATION: f64 = 1e-4;

/// Seed stream reserved for SFT minibatch sampling.
const SFT_STREAM: u64 = 0x5F7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub spec: TaskSpec,
    pub trajectories: Vec<Trajectory>,
}

impl DemoSet {
    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

fn is_idle(tr: &Transition) -> bool {
    tr.action.d_pos.norm() < IDLE_TRANSLATION
        && tr.action.d_rot.norm() < IDLE_ROTATION
        && tr.action.gripper_cmd == tr.state.gripper
}

/// Drop idle transitions, keeping at least the first one.
pub fn filter_idle(traj: &Trajectory) -> Trajectory {
    let mut transitions: Vec<Transition> = traj.transitions.iter().filter(|t| !is_idle(t)).cloned().collect();
    if transitions.is_empty() {
        transitions.extend(traj.transitions.first().cloned());
    }
    Trajectory { task: traj.task, episode: traj.episode, transitions }
}

/// Observation and normalized-action matrices for a set of transitions.
pub fn transition_batch<'a, I>(transitions: I, spec: &TaskSpec) -> (Array2<f64>, Array2<f64>)
where
    I: IntoIterator<Item = &'a Transition>,
{
    let (obs, act): (Vec<[f64; OBS_DIM]>, Vec<[f64; ACTION_DIM]>) =
        transitions.into_iter().map(|t| (observe(&t.state, spec), t.action.to_policy(spec))).unzip();
    (stack_rows(&obs), stack_rows(&act))
}

/// `−(1/N) Σ log π(a_i | s_i)` with parameter gradients.
pub fn bc_loss_and_grad(policy: &GaussianPolicy, obs: &Array2<f64>, actions: &Array2<f64>) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    if obs.nrows() == 0 {
        return Err(Error::Empty("behavior cloning batch".into()));
    }
    let mut tape = Tape::new();
    let vars = policy.bind(&mut tape);
    let lp = policy.log_prob_tape(&mut tape, &vars, obs.clone(), actions.clone())?;
    let mean = tape.mean(lp)?;
    let loss = tape.scale(mean, -1.0);
    let grads = tape.backward(loss, policy.num_slots())?;
    Ok((tape.scalar(loss), grads))
}

/// Loss value only.
pub fn bc_loss(policy: &GaussianPolicy, obs: &Array2<f64>, actions: &Array2<f64>) -> Result<f64> {
    if obs.nrows() == 0 {
        return Err(Error::Empty("behavior cloning batch".into()));
    }
    let lp = policy.log_prob(obs, actions)?;
    Ok(-lp.mean().expect("non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Total optimizer steps (a resumed run continues up to this count).
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { steps: 2000, batch_size: 256, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftRow {
    pub step: u64,
    pub loss: f64,
}

/// Minibatch NLL training. `start` is either a fresh checkpoint (step 0) or
/// a partially trained one; resuming reproduces an uninterrupted run exactly.
pub fn train_sft(start: Checkpoint, demos: &DemoSet, cfg: &SftConfig) -> Result<(Checkpoint, Vec<SftRow>)> {
    let (obs, act) = transition_batch(demos.trajectories.iter().flat_map(|t| &t.transitions), &demos.spec);
    if obs.nrows() == 0 {
        return Err(Error::Empty("demonstration set".into()));
    }
    let mut ck = start;
    ck.phase = "sft".into();
    let mut rng = match &ck.rng {
        Some(state) => state.restore(),
        None => RngState { seed: cfg.seed, stream: SFT_STREAM, word_pos: 0 }.restore(),
    };
    let mut opt = ck.policy_opt.take().unwrap_or_else(|| Adam::new(cfg.lr));
    let n = obs.nrows();
    let bs = cfg.batch_size.min(n).max(1);
    let mut rows = Vec::new();
    while ck.step < cfg.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
        let ob = obs.select(ndarray::Axis(0), &idx);
        let ac = act.select(ndarray::Axis(0), &idx);
        let (loss, grads) = bc_loss_and_grad(&ck.policy, &ob, &ac)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("behavior cloning loss {loss} at step {}", ck.step)));
        }
        opt.step(ck.policy.tensors_mut(), &grads)?;
        ck.policy.clamp_log_std();
        ck.step += 1;
        rows.push(SftRow { step: ck.step, loss });
    }
    ck.policy_opt = Some(opt);
    ck.rng = Some(RngState::capture(cfg.seed, SFT_STREAM, &rng));
    Ok((ck, rows))
}

/// Fresh policy sized for the simulator's observation and action spaces.
pub fn init_policy(seed: u64, hidden: &[usize], init_log_std: f64) -> GaussianPolicy {
    let mut rng = crate::seeding::rng_from(derive_seed(seed, 0x1417), 0);
    GaussianPolicy::new(OBS_DIM, hidden, ACTION_DIM, init_log_std, &mut rng)
}
