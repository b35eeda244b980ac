//! Dataset generation, annotation and the imitation → preference →
//! interaction orchestrator.
//!
//! A run writes `<out>/<name>/<phase>/` holding one checkpoint per seed,
//! `metrics.csv` and `manifest.json`, plus a consolidated `report.csv` at the
//! run root. Nothing in the output depends on wall-clock time or absolute
//! paths, so repeating a run reproduces every byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::env::{corrupt_expert, default_failure_modes, rollout, scripted_expert, FailureMode, TaskKind, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EVAL_EPISODES};
use crate::imitation::{filter_idle, init_policy, train_sft, DemoSet, SftConfig};
use crate::interact::{train_sta_ppo, PpoConfig};
use crate::io::{self, cell, PairRecord, SegmentRecord};
use crate::nn::Checkpoint;
use crate::par::Exec;
use crate::preference::{build_pairs, eligible_stages, train_tpo, PreferenceLossConfig, PreferencePair, TpoConfig, DEFAULT_BETA};
use crate::stare::{segment, StageId, StageProfile, DEFAULT_LAMBDA};

pub const DEFAULT_DEMOS: usize = 100;
pub const DEFAULT_PAIRS: usize = 50;

/// Dataset episode ids live far above the evaluation ids `0..n`.
const DEMO_EPISODE_BASE: u64 = 1 << 40;
const PAIR_EPISODE_BASE: u64 = 1 << 41;
const SEED_STRIDE: u64 = 1 << 20;
/// Attempts allowed per requested record before giving up.
const ATTEMPTS_PER_RECORD: usize = 4;

fn dataset_episode(base: u64, seed: u64, i: usize) -> Result<u64> {
    if seed >= (1 << 19) || i as u64 >= SEED_STRIDE {
        return Err(Error::Config(format!("dataset seed {seed} or index {i} out of range")));
    }
    Ok(base + seed * SEED_STRIDE + i as u64)
}

fn attempt_budget(count: usize) -> Result<usize> {
    if count == 0 {
        return Err(Error::Precondition("dataset count must be at least 1".into()));
    }
    Ok(count.saturating_mul(ATTEMPTS_PER_RECORD).min(SEED_STRIDE as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoGen {
    pub demos: DemoSet,
    /// Episode ids on which the expert failed (skipped).
    pub skipped: Vec<u64>,
}

/// `count` successful expert demonstrations with idle steps removed.
pub fn demo_gen(spec: &TaskSpec, count: usize, seed: u64) -> Result<DemoGen> {
    let budget = attempt_budget(count)?;
    let mut trajectories = Vec::with_capacity(count);
    let mut skipped = Vec::new();
    for i in 0..budget {
        if trajectories.len() == count {
            break;
        }
        let ep = dataset_episode(DEMO_EPISODE_BASE, seed, i)?;
        let traj = rollout(spec, ep, |s| scripted_expert(s, spec))?;
        if traj.succeeded() {
            trajectories.push(filter_idle(&traj));
        } else {
            log::warn!("expert failed on episode {ep}; skipped");
            skipped.push(ep);
        }
    }
    if trajectories.len() < count {
        return Err(Error::Contract(format!("expert succeeded on only {} of {budget} episodes", trajectories.len())));
    }
    Ok(DemoGen { demos: DemoSet { spec: spec.clone(), trajectories }, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub mode: FailureMode,
    pub pair: PreferencePair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGen {
    pub pairs: Vec<GeneratedPair>,
    pub skipped: Vec<u64>,
}

/// Expert and corrupted rollouts on shared episode seeds, cycling through
/// `modes` so that every failure mode is represented.
pub fn pair_gen(spec: &TaskSpec, count: usize, seed: u64, modes: &[FailureMode]) -> Result<PairGen> {
    if modes.is_empty() {
        return Err(Error::Precondition("pair generation needs at least one failure mode".into()));
    }
    let budget = attempt_budget(count)?;
    let profile = StageProfile::for_spec(spec);
    let mut pairs = Vec::with_capacity(count);
    let mut skipped = Vec::new();
    for i in 0..budget {
        if pairs.len() == count {
            break;
        }
        let ep = dataset_episode(PAIR_EPISODE_BASE, seed, i)?;
        let mode = modes[pairs.len() % modes.len()];
        let good = rollout(spec, ep, |s| scripted_expert(s, spec))?;
        let mut failure = None;
        let bad = rollout(spec, ep, |s| match corrupt_expert(s, spec, mode) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                scripted_expert(s, spec)
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        match build_pairs(&[good], &[bad], spec, &profile)?.pop() {
            Some(pair) => pairs.push(GeneratedPair { mode, pair }),
            None => {
                log::warn!("no preference on episode {ep} ({mode}); skipped");
                skipped.push(ep);
            }
        }
    }
    if pairs.len() < count {
        return Err(Error::Contract(format!("only {} of {count} pairs after {budget} attempts", pairs.len())));
    }
    Ok(PairGen { pairs, skipped })
}

pub const PAIR_INDEX: &str = "pairs.jsonl";
const CHOSEN_FILE: &str = "chosen.jsonl";
const REJECTED_FILE: &str = "rejected.jsonl";

/// Write `pairs.jsonl` plus the chosen and rejected trajectory files into `dir`.
pub fn write_pair_set(dir: &Path, pairs: &[GeneratedPair], profile: &StageProfile) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|g| {
            let p = &g.pair;
            let eligible = eligible_stages(&p.chosen_segments, &p.rejected_segments, profile.num_stages());
            PairRecord {
                episode_seed: p.episode,
                chosen_path: CHOSEN_FILE.into(),
                rejected_path: REJECTED_FILE.into(),
                eligible_stages: eligible.iter().map(|&(ci, _)| p.chosen_segments[ci].stage).collect(),
                failure_mode: g.mode.to_string(),
            }
        })
        .collect();
    let chosen: Vec<Trajectory> = pairs.iter().map(|g| g.pair.chosen.clone()).collect();
    let rejected: Vec<Trajectory> = pairs.iter().map(|g| g.pair.rejected.clone()).collect();
    io::write_trajectories(&dir.join(CHOSEN_FILE), &chosen)?;
    io::write_trajectories(&dir.join(REJECTED_FILE), &rejected)?;
    io::write_pair_index(&dir.join(PAIR_INDEX), &records)
}

/// Load a pair set from its index, re-segmenting every trajectory.
pub fn read_pair_set(index: &Path, spec: &TaskSpec, profile: &StageProfile) -> Result<Vec<PreferencePair>> {
    let base = index.parent().unwrap_or(Path::new("."));
    let records = io::read_pair_index(index)?;
    let mut files: BTreeMap<String, BTreeMap<u64, Trajectory>> = BTreeMap::new();
    let mut lookup = |rel: &str, episode: u64| -> Result<Trajectory> {
        if !files.contains_key(rel) {
            let trajs = io::read_trajectories(&base.join(rel))?;
            files.insert(rel.to_string(), trajs.into_iter().map(|t| (t.episode, t)).collect());
        }
        files[rel]
            .get(&episode)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("episode {episode} missing from {rel}")))
    };
    let mut pairs = Vec::with_capacity(records.len());
    for rec in records {
        let chosen = lookup(&rec.chosen_path, rec.episode_seed)?;
        let rejected = lookup(&rec.rejected_path, rec.episode_seed)?;
        if chosen.task != spec.kind {
            return Err(Error::Config(format!("pair set is for task {}, run is for {}", chosen.task, spec.kind)));
        }
        pairs.push(PreferencePair {
            episode: rec.episode_seed,
            chosen_segments: segment(&chosen, spec, profile)?,
            rejected_segments: segment(&rejected, spec, profile)?,
            chosen,
            rejected,
        });
    }
    Ok(pairs)
}

/// Completion counts of one stage across annotated trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTally {
    pub task: TaskKind,
    pub stage: StageId,
    pub present: u64,
    pub completed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub trajectories: usize,
    pub successes: usize,
    pub tallies: Vec<StageTally>,
}

impl AnnotateSummary {
    pub fn csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["task", "stage", "present", "completed"].map(String::from).to_vec();
        let rows = self
            .tallies
            .iter()
            .map(|t| vec![t.task.to_string(), t.stage.to_string(), t.present.to_string(), t.completed.to_string()])
            .collect();
        (header, rows)
    }
}

/// Sibling path for the annotation summary table.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.csv")
}

/// Segment every trajectory of `inputs` and write one JSONL line per stage
/// segment to `out`, plus a summary table next to it. `spec` overrides the
/// default geometry of each trajectory's task. Nothing is written unless
/// every input parses and segments.
pub fn annotate(inputs: &[PathBuf], out: &Path, spec: Option<&TaskSpec>) -> Result<AnnotateSummary> {
    if inputs.is_empty() {
        return Err(Error::Precondition("annotate needs at least one input file".into()));
    }
    let mut records = Vec::new();
    let mut tallies: Vec<StageTally> = Vec::new();
    let mut summary = AnnotateSummary { trajectories: 0, successes: 0, tallies: Vec::new() };
    for path in inputs {
        for traj in io::read_trajectories(path)? {
            let spec = match spec {
                Some(s) if s.kind != traj.task => {
                    return Err(Error::Config(format!("{}: episode {} is task {}, expected {}", path.display(), traj.episode, traj.task, s.kind)))
                }
                Some(s) => s.clone(),
                None => TaskSpec::new(traj.task),
            };
            let profile = StageProfile::for_spec(&spec);
            let segs = segment(&traj, &spec, &profile)?;
            for &stage in &profile.stages {
                let idx = match tallies.iter().position(|t| t.task == traj.task && t.stage == stage) {
                    Some(i) => i,
                    None => {
                        tallies.push(StageTally { task: traj.task, stage, present: 0, completed: 0 });
                        tallies.len() - 1
                    }
                };
                if let Some(s) = segs.iter().find(|s| s.stage == stage) {
                    tallies[idx].present += 1;
                    tallies[idx].completed += s.completed as u64;
                }
            }
            records.extend(segs.iter().map(|s| SegmentRecord::new(traj.task, traj.episode, s)));
            summary.trajectories += 1;
            summary.successes += traj.succeeded() as usize;
        }
    }
    summary.tallies = tallies;
    io::write_segments(out, &records)?;
    let (header, rows) = summary.csv();
    if let Err(e) = io::write_csv(&summary_path(out), &header, &rows) {
        let _ = fs::remove_file(out);
        return Err(e);
    }
    Ok(summary)
}

/// Training phases, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sft,
    Tpo,
    StaTpo,
    Ppo,
    StaPpo,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Sft, Phase::Tpo, Phase::StaTpo, Phase::Ppo, Phase::StaPpo];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Sft => "sft",
            Phase::Tpo => "tpo",
            Phase::StaTpo => "sta_tpo",
            Phase::Ppo => "ppo",
            Phase::StaPpo => "sta_ppo",
        }
    }

    /// 0 imitation, 1 preference, 2 interaction.
    pub fn rank(self) -> u8 {
        match self {
            Phase::Sft => 0,
            Phase::Tpo | Phase::StaTpo => 1,
            Phase::Ppo | Phase::StaPpo => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown phase '{s}'")))
    }
}

/// Phases must move strictly forward through imitation, preference and
/// interaction, with at most one phase of each kind.
pub fn check_phase_order(phases: &[Phase]) -> Result<()> {
    if phases.is_empty() {
        return Err(Error::Config("no phases given".into()));
    }
    for w in phases.windows(2) {
        if w[1].rank() <= w[0].rank() {
            return Err(Error::Config(format!("phase {} cannot follow {}; order is sft, then tpo or sta_tpo, then ppo or sta_ppo", w[1], w[0])));
        }
    }
    Ok(())
}

/// Everything a run needs. Built from `key = value` text; see [`RunConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub spec: TaskSpec,
    pub phases: Vec<Phase>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub eval_episodes: usize,
    pub eval_every: u64,
    /// Upstream phase of the first phase when it is not `sft`.
    pub from: Option<Phase>,
    /// Existing demo file (shared by all seeds); generated per seed otherwise.
    pub demos: Option<PathBuf>,
    /// Existing pair index (shared by all seeds); generated per seed otherwise.
    pub pairs: Option<PathBuf>,
    pub demo_count: usize,
    pub pair_count: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub sft: SftConfig,
    pub tpo_steps: u64,
    pub tpo_batch_pairs: usize,
    pub tpo_lr: f64,
    pub beta: f64,
    pub lambda: f64,
    pub ppo: PpoConfig,
    /// Stages whose shaping is switched off in `sta_ppo`.
    pub stage_toggle: BTreeSet<StageId>,
    pub exec: Exec,
}

const TASK_KEYS: &[&str] = &[
    "kind", "object_size", "table_height", "lift_goal", "horizon", "seed", "a_max", "omega_max", "home", "workspace.min",
    "workspace.max", "rand.obj.min", "rand.obj.max", "rand.goal.min", "rand.goal.max", "rand.tilt",
];

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "name", "task_config", "phases", "seeds", "out", "eval_episodes", "eval_every", "from", "demos", "pairs",
        "demo_count", "pair_count", "policy.hidden", "policy.init_log_std", "sft.steps", "sft.batch_size", "sft.lr",
        "tpo.steps", "tpo.batch_pairs", "tpo.lr", "beta", "lambda", "ppo.total_env_steps", "ppo.n_envs", "ppo.horizon",
        "ppo.policy_lr", "ppo.value_lr", "ppo.epochs", "ppo.minibatches", "ppo.gamma", "ppo.gae_lambda", "ppo.clip_eps",
        "ppo.max_grad_norm", "ppo.entropy_coef", "ppo.init_log_std", "ppo.value_hidden", "stage_toggle",
    ];

    /// Defaults for `task`.
    pub fn new(spec: TaskSpec) -> Self {
        RunConfig {
            name: "run".into(),
            spec,
            phases: vec![Phase::Sft, Phase::StaTpo, Phase::StaPpo],
            seeds: vec![0],
            out: PathBuf::from("runs"),
            eval_episodes: EVAL_EPISODES,
            eval_every: 20_000,
            from: None,
            demos: None,
            pairs: None,
            demo_count: DEFAULT_DEMOS,
            pair_count: DEFAULT_PAIRS,
            hidden: vec![64, 64],
            init_log_std: -0.5,
            sft: SftConfig::default(),
            tpo_steps: 100,
            tpo_batch_pairs: 16,
            tpo_lr: 2e-5,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            ppo: PpoConfig::default(),
            stage_toggle: BTreeSet::new(),
            exec: Exec::Parallel,
        }
    }

    /// Parse a run config. Task geometry comes from the same file (or from
    /// `task_config`, resolved relative to `base`); unknown keys are errors.
    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !Self::KEYS.contains(k) && !TASK_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        let spec = match kv.get("task_config") {
            Some(p) => {
                let mut task_kv = KeyValues::load(&base.join(p))?;
                if let Some(kind) = kv.get("kind") {
                    task_kv.set("kind", kind);
                }
                TaskSpec::from_key_values(&task_kv)?
            }
            None => TaskSpec::from_key_values(kv)?,
        };
        let mut c = RunConfig::new(spec);
        let path = |k: &str| kv.get(k).map(|p| base.join(p));
        if let Some(v) = kv.get("name") {
            c.name = v.to_string();
        }
        if let Some(v) = kv.parse_list("phases") {
            c.phases = v.iter().map(|p| p.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = kv.parse_list("seeds") {
            c.seeds = parse_seeds(&v.join(","))?;
        }
        if let Some(v) = kv.get("out") {
            c.out = PathBuf::from(v);
        }
        if let Some(v) = kv.get("from") {
            c.from = Some(v.parse()?);
        }
        c.demos = path("demos");
        c.pairs = path("pairs");
        macro_rules! set {
            ($($key:literal => $field:expr),* $(,)?) => {$(
                if let Some(v) = kv.value($key)? { $field = v; }
            )*};
        }
        set! {
            "eval_episodes" => c.eval_episodes,
            "eval_every" => c.eval_every,
            "demo_count" => c.demo_count,
            "pair_count" => c.pair_count,
            "policy.init_log_std" => c.init_log_std,
            "sft.steps" => c.sft.steps,
            "sft.batch_size" => c.sft.batch_size,
            "sft.lr" => c.sft.lr,
            "tpo.steps" => c.tpo_steps,
            "tpo.batch_pairs" => c.tpo_batch_pairs,
            "tpo.lr" => c.tpo_lr,
            "beta" => c.beta,
            "lambda" => c.lambda,
            "ppo.total_env_steps" => c.ppo.total_env_steps,
            "ppo.n_envs" => c.ppo.n_envs,
            "ppo.horizon" => c.ppo.horizon,
            "ppo.policy_lr" => c.ppo.policy_lr,
            "ppo.value_lr" => c.ppo.value_lr,
            "ppo.epochs" => c.ppo.epochs,
            "ppo.minibatches" => c.ppo.minibatches,
            "ppo.gamma" => c.ppo.gamma,
            "ppo.gae_lambda" => c.ppo.gae_lambda,
            "ppo.clip_eps" => c.ppo.clip_eps,
            "ppo.max_grad_norm" => c.ppo.max_grad_norm,
            "ppo.entropy_coef" => c.ppo.entropy_coef,
        }
        if let Some(v) = kv.value::<f64>("ppo.init_log_std")? {
            c.ppo.init_log_std = Some(v);
        }
        if let Some(v) = kv.parse_list("policy.hidden") {
            c.hidden = parse_usizes("policy.hidden", &v)?;
        }
        if let Some(v) = kv.parse_list("ppo.value_hidden") {
            c.ppo.value_hidden = parse_usizes("ppo.value_hidden", &v)?;
        }
        if let Some(v) = kv.get("stage_toggle") {
            c.stage_toggle = parse_stages(v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_key_values(&KeyValues::load(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        check_phase_order(&self.phases)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::Config(format!("run name '{}' is not a plain directory name", self.name)));
        }
        if self.eval_episodes == 0 || self.eval_every == 0 {
            return Err(Error::Config("eval_episodes and eval_every must be positive".into()));
        }
        if self.demo_count == 0 || self.pair_count == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.sft.batch_size == 0 || self.tpo_batch_pairs == 0 || self.hidden.is_empty() {
            return Err(Error::Config("batch sizes and hidden layers must be non-empty".into()));
        }
        if !(self.beta > 0.0 && self.lambda >= 0.0 && self.sft.lr > 0.0 && self.tpo_lr > 0.0) {
            return Err(Error::Config("beta and learning rates must be positive, lambda non-negative".into()));
        }
        let stages = StageProfile::for_spec(&self.spec).stages;
        if let Some(s) = self.stage_toggle.iter().find(|s| !stages.contains(s)) {
            return Err(Error::Config(format!("stage_toggle names {s}, which task {} does not have", self.spec.kind)));
        }
        if let Some(from) = self.from {
            if from.rank() >= self.phases[0].rank() {
                return Err(Error::Config(format!("from = {from} does not precede {}", self.phases[0])));
            }
        }
        self.ppo.validate()
    }

    /// Canonical text of every setting that influences results. Output
    /// locations and the execution mode are excluded.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut kv = KeyValues::parse(&self.spec.to_config_text()).expect("task text parses");
        let mut set = |k: &str, v: String| kv.set(k, v);
        set("name", self.name.clone());
        set("phases", self.phases.iter().map(|p| p.name()).collect::<Vec<_>>().join(", "));
        set("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "));
        set("eval_episodes", self.eval_episodes.to_string());
        set("eval_every", self.eval_every.to_string());
        set("demo_count", self.demo_count.to_string());
        set("pair_count", self.pair_count.to_string());
        set("policy.hidden", list(&self.hidden));
        set("policy.init_log_std", self.init_log_std.to_string());
        set("sft.steps", self.sft.steps.to_string());
        set("sft.batch_size", self.sft.batch_size.to_string());
        set("sft.lr", self.sft.lr.to_string());
        set("tpo.steps", self.tpo_steps.to_string());
        set("tpo.batch_pairs", self.tpo_batch_pairs.to_string());
        set("tpo.lr", self.tpo_lr.to_string());
        set("beta", self.beta.to_string());
        set("lambda", self.lambda.to_string());
        let p = &self.ppo;
        set("ppo.total_env_steps", p.total_env_steps.to_string());
        set("ppo.n_envs", p.n_envs.to_string());
        set("ppo.horizon", p.horizon.to_string());
        set("ppo.policy_lr", p.policy_lr.to_string());
        set("ppo.value_lr", p.value_lr.to_string());
        set("ppo.epochs", p.epochs.to_string());
        set("ppo.minibatches", p.minibatches.to_string());
        set("ppo.gamma", p.gamma.to_string());
        set("ppo.gae_lambda", p.gae_lambda.to_string());
        set("ppo.clip_eps", p.clip_eps.to_string());
        set("ppo.max_grad_norm", p.max_grad_norm.to_string());
        set("ppo.entropy_coef", p.entropy_coef.to_string());
        set("ppo.value_hidden", list(&p.value_hidden));
        set("stage_toggle", self.stage_toggle.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "));
        if let Some(from) = self.from {
            kv.set("from", from.name());
        }
        if let Some(v) = p.init_log_std {
            kv.set("ppo.init_log_std", v.to_string());
        }
        kv.canonical_text()
    }

    pub fn config_hash(&self) -> String {
        io::blob_hash(self.canonical_text().as_bytes())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    fn tpo_config(&self, phase: Phase, seed: u64) -> TpoConfig {
        let loss = match phase {
            Phase::StaTpo => PreferenceLossConfig::sta_tpo(self.beta, self.lambda),
            _ => PreferenceLossConfig::tpo(self.beta),
        };
        TpoConfig { steps: self.tpo_steps, batch_pairs: self.tpo_batch_pairs, lr: self.tpo_lr, loss, seed }
    }

    fn ppo_config(&self, phase: Phase, seed: u64, dump: PathBuf) -> PpoConfig {
        let mut cfg = PpoConfig {
            seed,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            exec: self.exec,
            dump_path: Some(dump),
            stage_toggle: self.stage_toggle.clone(),
            ..self.ppo.clone()
        };
        if phase == Phase::Ppo {
            cfg = cfg.plain(&self.spec);
        }
        cfg
    }
}

/// Comma-separated seeds; `a..b` ranges (end exclusive) are expanded.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list '{text}'"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a >= b {
                    return Err(bad());
                }
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    let unique: BTreeSet<u64> = out.iter().copied().collect();
    if unique.len() != out.len() {
        return Err(Error::Config(format!("duplicate seeds in '{text}'")));
    }
    Ok(out)
}

/// Comma-separated stage names; `none` or an empty string is the empty set.
pub fn parse_stages(text: &str) -> Result<BTreeSet<StageId>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("none"))
        .map(|s| s.parse::<StageId>().map_err(|_| Error::Config(format!("unknown stage '{s}'"))))
        .collect()
}

fn parse_usizes(key: &str, v: &[String]) -> Result<Vec<usize>> {
    v.iter()
        .map(|x| x.parse::<usize>().ok().filter(|&n| n > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config(format!("'{key}' expects positive integers")))
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("checkpoint_s{seed}.json")
}

/// Evaluation outcome of one seed of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub final_eval: EvalReport,
    /// Best intermediate evaluation and its env-step count (interaction phases only).
    pub best: Option<(u64, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    pub phase: Phase,
    pub seeds: Vec<SeedResult>,
}

impl PhaseResult {
    pub fn mean_success(&self) -> f64 {
        self.seeds.iter().map(|s| s.final_eval.success_rate).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn mean_conditional(&self, stage: StageId) -> Option<f64> {
        crate::eval::mean_of(&self.seeds.iter().map(|s| s.final_eval.clone()).collect::<Vec<_>>(), |r| r.conditional_percent(stage))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: String,
    pub phase: Phase,
    pub task: TaskKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<ManifestEntry>,
    pub outputs: Vec<ManifestEntry>,
}

fn entry(run_dir: &Path, path: &Path) -> Result<ManifestEntry> {
    let shown = path.strip_prefix(run_dir).unwrap_or(path);
    Ok(ManifestEntry { path: shown.to_string_lossy().replace('\\', "/"), blob: io::file_hash(path)? })
}

/// One row of the uniform `metrics.csv` schema.
#[derive(Debug, Clone, Default)]
struct MetricRow {
    seed: u64,
    kind: &'static str,
    step: u64,
    env_steps: Option<u64>,
    loss: Option<f64>,
    value_loss: Option<f64>,
    mean_return: Option<f64>,
    mean_shaped_return: Option<f64>,
    gaps: Vec<Option<f64>>,
    eval: Option<EvalReport>,
}

fn metrics_header(stages: &[StageId]) -> Vec<String> {
    let mut h: Vec<String> = ["seed", "kind", "step", "env_steps", "loss", "value_loss", "mean_return", "mean_shaped_return"]
        .map(String::from)
        .to_vec();
    h.extend(stages.iter().map(|s| format!("gap_{s}")));
    h.extend(["success_rate", "grasp_rate", "mean_length"].map(String::from));
    h.extend(stages.iter().map(|s| format!("cond_{s}")));
    h
}

fn eval_cells(eval: Option<&EvalReport>, stages: &[StageId]) -> Vec<String> {
    let mut out = vec![
        cell(eval.map(|e| e.success_rate)),
        cell(eval.map(|e| e.grasp_rate)),
        cell(eval.map(|e| e.mean_length)),
    ];
    out.extend(stages.iter().map(|&s| cell(eval.and_then(|e| e.conditional_percent(s)))));
    out
}

impl MetricRow {
    fn cells(&self, stages: &[StageId]) -> Vec<String> {
        let mut out = vec![
            self.seed.to_string(),
            self.kind.to_string(),
            self.step.to_string(),
            self.env_steps.map(|v| v.to_string()).unwrap_or_default(),
            cell(self.loss),
            cell(self.value_loss),
            cell(self.mean_return),
            cell(self.mean_shaped_return),
        ];
        out.extend((0..stages.len()).map(|k| cell(self.gaps.get(k).copied().flatten())));
        out.extend(eval_cells(self.eval.as_ref(), stages));
        out
    }
}

/// Datasets resolved for one seed.
struct SeedData {
    demos: Option<(PathBuf, DemoSet)>,
    pairs: Option<(PathBuf, Vec<PreferencePair>)>,
}

fn prepare_data(cfg: &RunConfig, seed: u64, profile: &StageProfile) -> Result<SeedData> {
    let data_dir = cfg.run_dir().join("data");
    let mut data = SeedData { demos: None, pairs: None };
    if cfg.phases.contains(&Phase::Sft) {
        let (path, trajectories) = match &cfg.demos {
            Some(p) => (p.clone(), io::read_trajectories(p)?),
            None => {
                let p = data_dir.join(format!("demos_s{seed}.jsonl"));
                let gen = demo_gen(&cfg.spec, cfg.demo_count, seed)?;
                io::write_trajectories(&p, &gen.demos.trajectories)?;
                (p, gen.demos.trajectories)
            }
        };
        if let Some(t) = trajectories.iter().find(|t| t.task != cfg.spec.kind) {
            return Err(Error::Config(format!("demo file holds task {}, run is for {}", t.task, cfg.spec.kind)));
        }
        data.demos = Some((path, DemoSet { spec: cfg.spec.clone(), trajectories }));
    }
    if cfg.phases.iter().any(|p| p.rank() == 1) {
        let index = match &cfg.pairs {
            Some(p) => p.clone(),
            None => {
                let dir = data_dir.join(format!("pairs_s{seed}"));
                let gen = pair_gen(&cfg.spec, cfg.pair_count, seed, &default_failure_modes(cfg.spec.kind))?;
                write_pair_set(&dir, &gen.pairs, profile)?;
                dir.join(PAIR_INDEX)
            }
        };
        let pairs = read_pair_set(&index, &cfg.spec, profile)?;
        data.pairs = Some((index, pairs));
    }
    Ok(data)
}

fn pair_files(index: &Path) -> Result<Vec<PathBuf>> {
    let base = index.parent().unwrap_or(Path::new("."));
    let mut files: BTreeSet<PathBuf> = BTreeSet::from([index.to_path_buf()]);
    for r in io::read_pair_index(index)? {
        files.insert(base.join(r.chosen_path));
        files.insert(base.join(r.rejected_path));
    }
    Ok(files.into_iter().collect())
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let json = ck.to_json()?;
    io::write_atomic(path, |w| Ok(std::io::Write::write_all(w, json.as_bytes())?))
}

/// Run the configured phases serially, each starting from the previous
/// phase's checkpoint. The first phase starts from a fresh policy (`sft`) or
/// from the checkpoint of `cfg.from` (default `sft`) already on disk.
pub fn run_ipi(cfg: &RunConfig) -> Result<Vec<PhaseResult>> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let profile = StageProfile::for_spec(&cfg.spec).with_lambda(cfg.lambda);
    let stages = profile.stages.clone();

    // Resolve the upstream of the first phase before doing any work.
    let first = cfg.phases[0];
    let upstream = (first != Phase::Sft).then(|| cfg.from.unwrap_or(Phase::Sft));
    let mut current: BTreeMap<u64, (Checkpoint, Option<PathBuf>)> = BTreeMap::new();
    for &seed in &cfg.seeds {
        match upstream {
            Some(up) => {
                let path = run_dir.join(up.name()).join(checkpoint_name(seed));
                let ck = Checkpoint::load(&path).map_err(|e| match e {
                    Error::MissingCheckpoint(_) => Error::MissingCheckpoint(format!(
                        "phase {first} needs the {up} checkpoint of seed {seed} at {}; run {up} first",
                        path.display()
                    )),
                    e => e,
                })?;
                current.insert(seed, (ck, Some(path)));
            }
            None => {
                current.insert(seed, (Checkpoint::new("init", init_policy(seed, &cfg.hidden, cfg.init_log_std)), None));
            }
        }
    }

    let mut data = BTreeMap::new();
    for &seed in &cfg.seeds {
        data.insert(seed, prepare_data(cfg, seed, &profile)?);
    }

    let mut results = Vec::new();
    for &phase in &cfg.phases {
        let phase_dir = run_dir.join(phase.name());
        fs::create_dir_all(&phase_dir)?;
        let mut rows: Vec<MetricRow> = Vec::new();
        let mut seeds_out = Vec::new();
        let mut inputs: BTreeSet<PathBuf> = BTreeSet::new();
        let mut outputs = Vec::new();
        for &seed in &cfg.seeds {
            let (start, start_path) = current.remove(&seed).expect("every seed has a checkpoint");
            inputs.extend(start_path);
            let d = &data[&seed];
            let mut best = None;
            let ck = match phase {
                Phase::Sft => {
                    let (path, demos) = d.demos.as_ref().expect("demos prepared for sft");
                    inputs.insert(path.clone());
                    let (ck, log) = train_sft(start, demos, &SftConfig { seed, ..cfg.sft.clone() })?;
                    rows.extend(log.iter().map(|r| MetricRow { seed, kind: "train", step: r.step, loss: Some(r.loss), ..Default::default() }));
                    ck
                }
                Phase::Tpo | Phase::StaTpo => {
                    let (index, pairs) = d.pairs.as_ref().expect("pairs prepared for preference phases");
                    inputs.extend(pair_files(index)?);
                    let (ck, log) = train_tpo(start, pairs, &cfg.spec, &profile, &cfg.tpo_config(phase, seed))?;
                    rows.extend(log.into_iter().map(|r| MetricRow {
                        seed,
                        kind: "train",
                        step: r.step,
                        loss: Some(r.loss),
                        gaps: r.gaps,
                        ..Default::default()
                    }));
                    ck
                }
                Phase::Ppo | Phase::StaPpo => {
                    let dump = phase_dir.join(format!("nan_dump_s{seed}.json"));
                    let (ck, log) = train_sta_ppo(start, &cfg.spec, &cfg.ppo_config(phase, seed, dump))?;
                    best = log
                        .iter()
                        .filter(|r| r.env_steps > 0)
                        .fold(None::<&crate::interact::PpoRow>, |b, r| match b {
                            Some(b) if b.eval.success_rate >= r.eval.success_rate => Some(b),
                            _ => Some(r),
                        })
                        .map(|r| (r.env_steps, r.eval.clone()));
                    rows.extend(log.into_iter().map(|r| MetricRow {
                        seed,
                        kind: "eval",
                        step: r.update,
                        env_steps: Some(r.env_steps),
                        loss: r.policy_loss,
                        value_loss: r.value_loss,
                        mean_return: r.mean_return,
                        mean_shaped_return: r.mean_shaped_return,
                        eval: Some(r.eval),
                        ..Default::default()
                    }));
                    ck
                }
            };
            let final_eval = evaluate(&ck.policy, &cfg.spec, cfg.eval_episodes, vec![seed], cfg.exec)?;
            rows.push(MetricRow { seed, kind: "final", step: ck.step, eval: Some(final_eval.clone()), ..Default::default() });
            let path = phase_dir.join(checkpoint_name(seed));
            save_checkpoint(&path, &ck)?;
            outputs.push(path.clone());
            current.insert(seed, (ck.clone(), Some(path)));
            seeds_out.push(SeedResult { seed, checkpoint: ck, final_eval, best });
        }
        let metrics = phase_dir.join("metrics.csv");
        io::write_csv(&metrics, &metrics_header(&stages), &rows.iter().map(|r| r.cells(&stages)).collect::<Vec<_>>())?;
        outputs.push(metrics);
        let manifest = Manifest {
            run: cfg.name.clone(),
            phase,
            task: cfg.spec.kind,
            config_hash: cfg.config_hash(),
            seeds: cfg.seeds.clone(),
            inputs: inputs.iter().map(|p| entry(&run_dir, p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| entry(&run_dir, p)).collect::<Result<_>>()?,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        io::write_atomic(&phase_dir.join("manifest.json"), |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))?;
        results.push(PhaseResult { phase, seeds: seeds_out });
    }
    write_report(&run_dir, &stages, &results)?;
    Ok(results)
}

/// Merge this invocation's phases into `<run>/report.csv`, keeping rows of
/// phases run earlier.
fn write_report(run_dir: &Path, stages: &[StageId], results: &[PhaseResult]) -> Result<()> {
    let path = run_dir.join("report.csv");
    let mut header = ["phase", "seed", "label", "env_steps", "episodes"].map(String::from).to_vec();
    header.extend(metrics_header(stages).into_iter().skip_while(|h| h != "success_rate"));
    let ran: BTreeSet<&str> = results.iter().map(|r| r.phase.name()).collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    if path.exists() {
        let (old_header, old_rows) = io::read_csv(&path)?;
        if old_header == header {
            rows.extend(old_rows.into_iter().filter(|r| !ran.contains(r[0].as_str())));
        }
    }
    for r in results {
        let mut line = |seed: String, label: &str, steps: Option<u64>, e: &EvalReport| {
            let mut row = vec![r.phase.name().to_string(), seed, label.to_string(), steps.map(|s| s.to_string()).unwrap_or_default(), e.episodes.to_string()];
            row.extend(eval_cells(Some(e), stages));
            rows.push(row);
        };
        for s in &r.seeds {
            line(s.seed.to_string(), "final", None, &s.final_eval);
            if let Some((steps, e)) = &s.best {
                line(s.seed.to_string(), "best", Some(*steps), e);
            }
        }
        let mut mean = vec![r.phase.name().to_string(), "mean".into(), "final".into(), String::new(), r.seeds[0].final_eval.episodes.to_string()];
        let reports: Vec<EvalReport> = r.seeds.iter().map(|s| s.final_eval.clone()).collect();
        let m = |f: &dyn Fn(&EvalReport) -> Option<f64>| cell(crate::eval::mean_of(&reports, f));
        mean.push(m(&|e| Some(e.success_rate)));
        mean.push(m(&|e| Some(e.grasp_rate)));
        mean.push(m(&|e| Some(e.mean_length)));
        for &st in stages {
            mean.push(m(&|e| e.conditional_percent(st)));
        }
        rows.push(mean);
    }
    let rank = |name: &str| name.parse::<Phase>().map(|p| p as usize).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| rank(&r[0]));
    io::write_csv(&path, &header, &rows)
}
