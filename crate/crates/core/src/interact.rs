//! On-policy interaction phase: clipped PPO over stage-shaped rewards, with a
//! per-stage switch that falls back to the sparse reward.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{observe, reset, step, SimAction, SimState, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::nn::{clip_grad_norm, half_ln_two_pi, stack_rows, Adam, Checkpoint, GaussianPolicy, Tape, ValueNet};
use crate::par::{for_each_mut, Exec};
use crate::seeding::{derive_seed, rng_from};
use crate::stare::{shape_reward, stage_of, StageId, StageProfile};

/// Seed streams owned by this phase.
const ENV_STREAM: u64 = 0x0E57;
const UPDATE_STREAM: u64 = 0x0AD7;
const VALUE_INIT_STREAM: u64 = 0x7A1E;

/// Training episode ids carry the top bit so they never coincide with
/// evaluation ids, which count up from zero.
const TRAIN_EPISODE_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    /// Global gradient-norm clip applied to each network separately.
    pub max_grad_norm: f64,
    pub n_envs: usize,
    /// Steps per environment per rollout.
    pub horizon: usize,
    pub total_env_steps: u64,
    /// Stages whose transitions receive the sparse reward instead of the shaped one.
    pub stage_toggle: BTreeSet<StageId>,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub value_hidden: Vec<usize>,
    /// Overrides the incoming policy's log-std before training, if set.
    pub init_log_std: Option<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
    /// Where a diagnostic minibatch is written if the loss turns non-finite.
    pub dump_path: Option<PathBuf>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            policy_lr: 1e-4,
            value_lr: 3e-3,
            epochs: 1,
            minibatches: 4,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            n_envs: 16,
            horizon: 60,
            total_env_steps: 600_000,
            stage_toggle: BTreeSet::new(),
            eval_every: 20_000,
            eval_episodes: 300,
            value_hidden: vec![64, 64],
            init_log_std: None,
            seed: 0,
            exec: Exec::Parallel,
            dump_path: None,
        }
    }
}

impl PpoConfig {
    /// Plain PPO: shaping switched off at every stage of the task.
    pub fn plain(mut self, spec: &TaskSpec) -> Self {
        self.stage_toggle = StageProfile::for_spec(spec).stages.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.n_envs == 0 || self.horizon == 0 || self.minibatches == 0 || self.epochs == 0 {
            return bad("n_envs, horizon, epochs and minibatches must be positive");
        }
        if self.minibatches > self.n_envs * self.horizon {
            return bad("more minibatches than transitions per rollout");
        }
        if self.eval_episodes == 0 || self.eval_every == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if !(self.policy_lr > 0.0 && self.value_lr > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning rates and max_grad_norm must be positive");
        }
        Ok(())
    }

    pub fn steps_per_rollout(&self) -> u64 {
        (self.n_envs * self.horizon) as u64
    }
}

/// Transitions of one rollout round, env-major: entry `e * horizon + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub horizon: usize,
    pub obs: Array2<f64>,
    /// Raw (unclipped) policy samples.
    pub action: Array2<f64>,
    pub log_prob_old: Vec<f64>,
    pub reward: Vec<f64>,
    pub shaped: Vec<f64>,
    /// `γV(s_H)` on horizon truncations, zero elsewhere.
    pub truncation_bootstrap: Vec<f64>,
    pub value: Vec<f64>,
    pub done: Vec<bool>,
    pub stage: Vec<StageId>,
    pub episode: Vec<u64>,
    pub states: Vec<SimState>,
    pub next_states: Vec<SimState>,
    /// `V(s)` after the last step of each env (unused when that step is done).
    pub last_value: Vec<f64>,
    /// (raw, shaped) returns of episodes that ended inside this rollout.
    pub finished: Vec<(f64, f64)>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    /// Rewards fed to the advantage estimator.
    pub fn effective_rewards(&self) -> Vec<f64> {
        self.shaped.iter().zip(&self.truncation_bootstrap).map(|(r, b)| r + b).collect()
    }
}

struct StepRecord {
    obs: [f64; OBS_DIM],
    action: [f64; ACTION_DIM],
    log_prob: f64,
    reward: f64,
    shaped: f64,
    bootstrap: f64,
    value: f64,
    done: bool,
    stage: StageId,
    episode: u64,
    state: SimState,
    next_state: SimState,
}

/// One vectorized environment slot. Persists across rollouts so episodes
/// continue where the previous round stopped.
#[derive(Debug)]
pub struct EnvWorker {
    index: usize,
    seed: u64,
    state: SimState,
    episode: u64,
    started: u64,
    rng: ChaCha8Rng,
    ret: f64,
    shaped_ret: f64,
    records: Vec<StepRecord>,
    finished: Vec<(f64, f64)>,
    last_value: f64,
    error: Option<Error>,
}

impl std::fmt::Debug for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StepRecord(episode {}, t {})", self.episode, self.state.t)
    }
}

impl EnvWorker {
    pub fn new(spec: &TaskSpec, seed: u64, index: usize) -> Self {
        let episode = Self::episode_id(seed, index, 0);
        EnvWorker {
            index,
            seed,
            state: reset(spec, episode),
            episode,
            started: 1,
            rng: rng_from(seed, ENV_STREAM + index as u64),
            ret: 0.0,
            shaped_ret: 0.0,
            records: Vec::new(),
            finished: Vec::new(),
            last_value: 0.0,
            error: None,
        }
    }

    fn episode_id(seed: u64, index: usize, n: u64) -> u64 {
        derive_seed(derive_seed(seed, ENV_STREAM + index as u64), n) | TRAIN_EPISODE_BIT
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    fn run(&mut self, policy: &GaussianPolicy, value: &ValueNet, spec: &TaskSpec, cfg: &PpoConfig) -> Result<()> {
        self.records.clear();
        self.finished.clear();
        for _ in 0..cfg.horizon {
            let obs = observe(&self.state, spec);
            let row = Array2::from_shape_vec((1, OBS_DIM), obs.to_vec()).expect("row");
            let (act, lp) = policy.sample(&row, &mut self.rng)?;
            let v = value.forward(&row)?[[0, 0]];
            let raw: [f64; ACTION_DIM] = act.row(0).to_vec().try_into().expect("action width");
            let tr = step(&self.state, &SimAction::from_policy(&raw, spec), spec)?;
            let stage = stage_of(&tr.state, spec);
            let shaped = if cfg.stage_toggle.contains(&stage) {
                tr.reward
            } else {
                shape_reward(tr.reward, &tr.state, &tr.next_state, spec, cfg.gamma)
            };
            let next = &tr.next_state;
            let bootstrap = if next.terminal && !next.success {
                let nrow = Array2::from_shape_vec((1, OBS_DIM), observe(next, spec).to_vec()).expect("row");
                cfg.gamma * value.forward(&nrow)?[[0, 0]]
            } else {
                0.0
            };
            self.ret += tr.reward;
            self.shaped_ret += shaped;
            let done = tr.done;
            self.records.push(StepRecord {
                obs,
                action: raw,
                log_prob: lp[[0, 0]],
                reward: tr.reward,
                shaped,
                bootstrap,
                value: v,
                done,
                stage,
                episode: self.episode,
                state: tr.state,
                next_state: tr.next_state.clone(),
            });
            if done {
                self.finished.push((self.ret, self.shaped_ret));
                self.ret = 0.0;
                self.shaped_ret = 0.0;
                self.episode = Self::episode_id(self.seed, self.index, self.started);
                self.started += 1;
                self.state = reset(spec, self.episode);
            } else {
                self.state = tr.next_state;
            }
        }
        let row = Array2::from_shape_vec((1, OBS_DIM), observe(&self.state, spec).to_vec()).expect("row");
        self.last_value = value.forward(&row)?[[0, 0]];
        Ok(())
    }
}

/// Fresh environment slots for a training run.
pub fn make_workers(spec: &TaskSpec, cfg: &PpoConfig) -> Vec<EnvWorker> {
    (0..cfg.n_envs).map(|i| EnvWorker::new(spec, cfg.seed, i)).collect()
}

/// Run every worker for `cfg.horizon` steps with a frozen policy snapshot and
/// merge the results in env order.
pub fn collect_rollout(
    policy: &GaussianPolicy,
    value: &ValueNet,
    workers: &mut [EnvWorker],
    spec: &TaskSpec,
    cfg: &PpoConfig,
) -> Result<RolloutBuffer> {
    for_each_mut(cfg.exec, workers, |_, w| {
        w.error = w.run(policy, value, spec, cfg).err();
    });
    if let Some(e) = workers.iter_mut().find_map(|w| w.error.take()) {
        return Err(e);
    }
    let records: Vec<&StepRecord> = workers.iter().flat_map(|w| &w.records).collect();
    Ok(RolloutBuffer {
        n_envs: workers.len(),
        horizon: cfg.horizon,
        obs: stack_rows(&records.iter().map(|r| r.obs).collect::<Vec<_>>()),
        action: stack_rows(&records.iter().map(|r| r.action).collect::<Vec<_>>()),
        log_prob_old: records.iter().map(|r| r.log_prob).collect(),
        reward: records.iter().map(|r| r.reward).collect(),
        shaped: records.iter().map(|r| r.shaped).collect(),
        truncation_bootstrap: records.iter().map(|r| r.bootstrap).collect(),
        value: records.iter().map(|r| r.value).collect(),
        done: records.iter().map(|r| r.done).collect(),
        stage: records.iter().map(|r| r.stage).collect(),
        episode: records.iter().map(|r| r.episode).collect(),
        states: records.iter().map(|r| r.state.clone()).collect(),
        next_states: records.iter().map(|r| r.next_state.clone()).collect(),
        last_value: workers.iter().map(|w| w.last_value).collect(),
        finished: workers.iter().flat_map(|w| w.finished.iter().copied()).collect(),
    })
}

/// Backward GAE recursion over one contiguous step sequence.
///
/// `values` holds `V(s_0..s_{n-1})` plus one bootstrap value for the state
/// after the last step. A `done` step cuts both the bootstrap and the trace.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Shape(format!(
            "gae: {n} rewards, {} values (expected {}), {} done flags",
            values.len(),
            n + 1,
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Advantages and returns for a whole buffer, one env segment at a time.
pub fn buffer_advantages(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if buf.len() != buf.n_envs * buf.horizon || buf.last_value.len() != buf.n_envs {
        return Err(Error::Shape("rollout buffer does not match its env layout".into()));
    }
    let rewards = buf.effective_rewards();
    let (mut adv, mut ret) = (Vec::with_capacity(buf.len()), Vec::with_capacity(buf.len()));
    for e in 0..buf.n_envs {
        let span = e * buf.horizon..(e + 1) * buf.horizon;
        let mut values = buf.value[span.clone()].to_vec();
        values.push(buf.last_value[e]);
        let (a, r) = compute_gae(&rewards[span.clone()], &values, &buf.done[span], gamma, lambda)?;
        adv.extend(a);
        ret.extend(r);
    }
    Ok((adv, ret))
}

/// Standardize to zero mean and unit variance; the std is floored at 1e-8.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

/// Minibatch inputs of the surrogate objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoBatch {
    pub obs: Array2<f64>,
    pub action: Array2<f64>,
    pub log_prob_old: Array2<f64>,
    pub advantage: Array2<f64>,
    pub returns: Array2<f64>,
}

impl PpoBatch {
    pub fn select(buf: &RolloutBuffer, adv: &[f64], ret: &[f64], idx: &[usize]) -> Self {
        let col = |v: &[f64]| Array2::from_shape_fn((idx.len(), 1), |(i, _)| v[idx[i]]);
        let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
        PpoBatch {
            obs: buf.obs.select(Axis(0), idx),
            action: buf.action.select(Axis(0), idx),
            log_prob_old: col(&buf.log_prob_old),
            advantage: Array2::from_shape_vec((idx.len(), 1), normalize_advantages(&a)).expect("column"),
            returns: col(ret),
        }
    }
}

/// Negated clipped surrogate minus the entropy bonus, with policy gradients.
/// Advantages are used as given.
pub fn ppo_loss(policy: &GaussianPolicy, b: &PpoBatch, clip_eps: f64, entropy_coef: f64) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    if b.obs.nrows() == 0 {
        return Err(Error::Empty("ppo minibatch".into()));
    }
    let mut tape = Tape::new();
    let vars = policy.bind(&mut tape);
    let lp = policy.log_prob_tape(&mut tape, &vars, b.obs.clone(), b.action.clone())?;
    let old = tape.constant(b.log_prob_old.clone());
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(b.advantage.clone());
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.min(unclipped, clipped)?;
    let mean = tape.mean(surrogate)?;
    let mut loss = tape.scale(mean, -1.0);
    if entropy_coef != 0.0 {
        // Entropy of a diagonal Gaussian: Σ log σ + D(½ + ½ log 2π).
        let sum_ls = tape.sum(vars.log_std);
        let offset = tape.constant(Array2::from_elem((1, 1), policy.act_dim() as f64 * (0.5 + half_ln_two_pi())));
        let entropy = tape.add(sum_ls, offset)?;
        let bonus = tape.scale(entropy, -entropy_coef);
        loss = tape.add(loss, bonus)?;
    }
    let grads = tape.backward(loss, policy.num_slots())?;
    Ok((tape.scalar(loss), grads))
}

/// `mean ½(V(s) − R)²` with value-net gradients.
pub fn value_loss(value: &ValueNet, obs: &Array2<f64>, returns: &Array2<f64>) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    if obs.nrows() == 0 {
        return Err(Error::Empty("value minibatch".into()));
    }
    let mut tape = Tape::new();
    let v = value.forward_tape(&mut tape, obs.clone())?;
    let target = tape.constant(returns.clone());
    let err = tape.sub(v, target)?;
    let sq = tape.square(err);
    let mean = tape.mean(sq)?;
    let loss = tape.scale(mean, 0.5);
    let grads = tape.backward(loss, value.num_slots())?;
    Ok((tape.scalar(loss), grads))
}

/// One learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoRow {
    pub env_steps: u64,
    pub update: u64,
    pub eval: EvalReport,
    /// Mean shaped return of episodes finished since the previous row.
    pub mean_shaped_return: Option<f64>,
    pub mean_return: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
}

impl PpoRow {
    pub fn success_rate(&self) -> f64 {
        self.eval.success_rate
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    env_steps: u64,
    update: u64,
    which: &'a str,
    batch: &'a PpoBatch,
}

fn check_finite(loss: f64, which: &str, batch: &PpoBatch, env_steps: u64, update: u64, cfg: &PpoConfig) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let mut msg = format!("{which} loss {loss} at update {update} ({env_steps} env steps)");
    if let Some(path) = &cfg.dump_path {
        let dump = NanDump { env_steps, update, which, batch };
        // Non-finite inputs cannot go through JSON; fall back to Debug text.
        let text = serde_json::to_string(&dump).unwrap_or_else(|_| format!("{batch:?}"));
        std::fs::write(path, text)?;
        msg.push_str(&format!("; minibatch dumped to {}", path.display()));
    }
    Err(Error::Numerical(msg))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Full interaction phase. Plain PPO is the same loop with every stage toggled off.
pub fn train_sta_ppo(start: Checkpoint, spec: &TaskSpec, cfg: &PpoConfig) -> Result<(Checkpoint, Vec<PpoRow>)> {
    cfg.validate()?;
    let mut policy = start.policy;
    if let Some(ls) = cfg.init_log_std {
        policy.log_std.fill(ls);
        policy.clamp_log_std();
    }
    // A fresh critic: the previous phases never train one.
    let mut value = ValueNet::new(OBS_DIM, &cfg.value_hidden, &mut rng_from(cfg.seed, VALUE_INIT_STREAM));
    let mut popt = Adam::new(cfg.policy_lr);
    let mut vopt = Adam::new(cfg.value_lr);
    let mut rng = rng_from(cfg.seed, UPDATE_STREAM);
    let mut workers = make_workers(spec, cfg);

    let evaluate_now = |p: &GaussianPolicy| evaluate(p, spec, cfg.eval_episodes, vec![cfg.seed], cfg.exec);
    let mut rows = vec![PpoRow {
        env_steps: 0,
        update: 0,
        eval: evaluate_now(&policy)?,
        mean_shaped_return: None,
        mean_return: None,
        policy_loss: None,
        value_loss: None,
    }];
    let (mut env_steps, mut update) = (0u64, 0u64);
    let mut next_eval = cfg.eval_every;
    let mut finished: Vec<(f64, f64)> = Vec::new();
    let (mut plosses, mut vlosses) = (Vec::new(), Vec::new());

    while env_steps < cfg.total_env_steps {
        let buf = collect_rollout(&policy, &value, &mut workers, spec, cfg)?;
        env_steps += buf.len() as u64;
        finished.extend(&buf.finished);
        let (adv, ret) = buffer_advantages(&buf, cfg.gamma, cfg.gae_lambda)?;
        let mut order: Vec<usize> = (0..buf.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in split_even(&order, cfg.minibatches) {
                update += 1;
                let batch = PpoBatch::select(&buf, &adv, &ret, chunk);
                let (pl, mut pg) = ppo_loss(&policy, &batch, cfg.clip_eps, cfg.entropy_coef)?;
                check_finite(pl, "policy", &batch, env_steps, update, cfg)?;
                let (vl, mut vg) = value_loss(&value, &batch.obs, &batch.returns)?;
                check_finite(vl, "value", &batch, env_steps, update, cfg)?;
                clip_grad_norm(&mut pg, cfg.max_grad_norm);
                clip_grad_norm(&mut vg, cfg.max_grad_norm);
                popt.step(policy.tensors_mut(), &pg)?;
                policy.clamp_log_std();
                vopt.step(value.tensors_mut(), &vg)?;
                plosses.push(pl);
                vlosses.push(vl);
            }
        }
        if env_steps >= next_eval || env_steps >= cfg.total_env_steps {
            while next_eval <= env_steps {
                next_eval += cfg.eval_every;
            }
            rows.push(PpoRow {
                env_steps,
                update,
                eval: evaluate_now(&policy)?,
                mean_shaped_return: mean(finished.iter().map(|f| f.1)),
                mean_return: mean(finished.iter().map(|f| f.0)),
                policy_loss: mean(plosses.drain(..)),
                value_loss: mean(vlosses.drain(..)),
            });
            finished.clear();
            log::debug!("ppo seed {} steps {env_steps}: success {:.1}%", cfg.seed, rows.last().expect("row").success_rate());
        }
    }

    let ck = Checkpoint {
        phase: if cfg.stage_toggle.len() >= StageProfile::for_spec(spec).num_stages() { "ppo" } else { "sta_ppo" }.into(),
        step: update,
        value: Some(value),
        policy_opt: Some(popt),
        value_opt: Some(vopt),
        rng: None,
        ..Checkpoint::new("", policy)
    };
    Ok((ck, rows))
}

/// Split into `k` contiguous chunks whose sizes differ by at most one.
fn split_even(xs: &[usize], k: usize) -> Vec<&[usize]> {
    let (q, r) = (xs.len() / k, xs.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = q + usize::from(i < r);
        out.push(&xs[at..at + len]);
        at += len;
    }
    out
}

/// First env-step count at which a curve reaches `threshold` percent success.
pub fn steps_to_reach(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, s)| *s >= threshold).map(|(e, _)| *e)
}

/// Pointwise mean of several curves sampled at the same env-step counts.
pub fn mean_curve(runs: &[Vec<PpoRow>]) -> Result<Vec<(u64, f64)>> {
    let first = runs.first().ok_or_else(|| Error::Empty("no learning curves".into()))?;
    let mut out = Vec::with_capacity(first.len());
    for (i, row) in first.iter().enumerate() {
        let mut sum = 0.0;
        for run in runs {
            let r = run.get(i).filter(|r| r.env_steps == row.env_steps).ok_or_else(|| {
                Error::Contract(format!("learning curves disagree at row {i}"))
            })?;
            sum += r.success_rate();
        }
        out.push((row.env_steps, sum / runs.len() as f64));
    }
    Ok(out)
}
