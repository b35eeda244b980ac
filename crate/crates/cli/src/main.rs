use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stare_core::config::KeyValues;
use stare_core::env::{default_failure_modes, FailureMode, TaskSpec};
use stare_core::eval::{evaluate, evaluate_sampled, EvalReport, EVAL_EPISODES};
use stare_core::io;
use stare_core::nn::Checkpoint;
use stare_core::oracle::{run_oracle, value_shift_tol, ORACLE_TOL};
use stare_core::par::Exec;
use stare_core::pipeline::{self, parse_seeds, Phase, RunConfig, DEFAULT_DEMOS, DEFAULT_PAIRS};
use stare_core::stare::StageProfile;
use stare_core::Error;

#[derive(Parser)]
#[command(name = "stare", version, about = "Stage-aware imitation, preference and interaction training on a toy manipulation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations (JSONL), one file per seed.
    DemoGen(DataArgs),
    /// Generate expert vs. corrupted-expert preference pairs, one directory per seed.
    PairGen(PairArgs),
    /// Behavior cloning from demonstrations.
    Sft(RunArgs),
    /// Whole-trajectory preference optimization.
    Tpo(RunArgs),
    /// Stage-wise preference optimization.
    StaTpo(RunArgs),
    /// PPO on the sparse task reward.
    Ppo(RunArgs),
    /// PPO on the stage-shaped reward.
    StaPpo(RunArgs),
    /// The configured phases in order (default: sft, sta_tpo, sta_ppo).
    Ipi(RunArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Segment trajectory files into annotated stages.
    Annotate(AnnotateArgs),
    /// Check shaping invariance on the tabular reach-and-grasp chain.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct TaskArgs {
    /// Task name: push, pull, pick_place or lift_peg_upright.
    #[arg(long)]
    task: Option<String>,
    /// `key = value` file with task geometry (and, for runs, run settings).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Seeds, e.g. `0,1,2` or `0..3`.
    #[arg(long, default_value = "0")]
    seed: String,
    /// Records per seed.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Failure modes cycled through, e.g. `miss_grasp,stall_at_grasp`.
    #[arg(long)]
    modes: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    seed: Option<String>,
    /// Evaluation episodes per checkpoint.
    #[arg(long)]
    episodes: Option<usize>,
    /// Stages whose shaping is switched off (sta-ppo), e.g. `upright` or `none`.
    #[arg(long)]
    stage_toggle: Option<String>,
    /// Stage-cost penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Preference temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Root directory for runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name (directory under `--out`).
    #[arg(long)]
    name: Option<String>,
    /// Phase whose checkpoints the first phase starts from (default sft).
    #[arg(long)]
    from: Option<String>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Seed labels recorded in the report (sampling seed with --stochastic).
    #[arg(long, default_value = "0")]
    seed: String,
    #[arg(long, default_value_t = EVAL_EPISODES)]
    episodes: usize,
    /// Sample actions instead of taking the policy mean.
    #[arg(long)]
    stochastic: bool,
    /// Write the report as CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    /// Segment JSONL output; the summary goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = ORACLE_TOL)]
    tol: f64,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn load_kv(config: Option<&Path>) -> Result<KeyValues, Error> {
    match config {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

/// Task geometry from `--config`, with `--task` overriding its kind.
fn task_spec(args: &TaskArgs) -> Result<Option<TaskSpec>, Error> {
    if args.task.is_none() && args.config.is_none() {
        return Ok(None);
    }
    let mut kv = load_kv(args.config.as_deref())?;
    if let Some(t) = &args.task {
        kv.set("kind", t.as_str());
    }
    TaskSpec::from_key_values(&kv).map(Some)
}

fn require_spec(args: &TaskArgs) -> Result<TaskSpec, Error> {
    task_spec(args)?.ok_or_else(|| Error::Config("give --task or --config".into()))
}

fn demo_gen(a: &DataArgs) -> Result<(), Error> {
    let spec = require_spec(&a.task)?;
    for seed in parse_seeds(&a.seed)? {
        let g = pipeline::demo_gen(&spec, a.episodes.unwrap_or(DEFAULT_DEMOS), seed)?;
        let path = a.out.join(format!("demos_s{seed}.jsonl"));
        io::write_trajectories(&path, &g.demos.trajectories)?;
        println!("{} trajectories={} skipped={}", path.display(), g.demos.trajectories.len(), g.skipped.len());
    }
    Ok(())
}

fn pair_gen(a: &PairArgs) -> Result<(), Error> {
    let spec = require_spec(&a.data.task)?;
    let modes: Vec<FailureMode> = match &a.modes {
        Some(m) => m.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => default_failure_modes(spec.kind),
    };
    let profile = StageProfile::for_spec(&spec);
    for seed in parse_seeds(&a.data.seed)? {
        let g = pipeline::pair_gen(&spec, a.data.episodes.unwrap_or(DEFAULT_PAIRS), seed, &modes)?;
        let dir = a.data.out.join(format!("pairs_s{seed}"));
        pipeline::write_pair_set(&dir, &g.pairs, &profile)?;
        println!("{} pairs={} skipped={}", dir.join(pipeline::PAIR_INDEX).display(), g.pairs.len(), g.skipped.len());
    }
    Ok(())
}

fn run(a: &RunArgs, phase: Option<Phase>) -> Result<(), Error> {
    let mut kv = load_kv(a.task.config.as_deref())?;
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(k, v);
        }
    };
    set("kind", a.task.task.clone());
    set("seeds", a.seed.clone());
    set("eval_episodes", a.episodes.map(|n| n.to_string()));
    set("stage_toggle", a.stage_toggle.clone());
    set("lambda", a.lambda.map(|v| v.to_string()));
    set("beta", a.beta.map(|v| v.to_string()));
    set("name", a.name.clone());
    set("from", a.from.clone());
    set("phases", phase.map(|p| p.name().to_string()));
    let base = a.task.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
    let mut cfg = RunConfig::from_key_values(&kv, base)?;
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    cfg.exec = exec(a.sequential);
    for r in pipeline::run_ipi(&cfg)? {
        let per_seed: Vec<String> = r.seeds.iter().map(|s| format!("{}:{}", s.seed, s.final_eval.success_rate)).collect();
        println!(
            "phase={} dir={} mean_success={} per_seed={}",
            r.phase,
            cfg.run_dir().join(r.phase.name()).display(),
            r.mean_success(),
            per_seed.join(",")
        );
    }
    Ok(())
}

fn report_csv(r: &EvalReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["episodes", "successes", "success_rate", "grasp_rate", "mean_length"].map(String::from).to_vec();
    let mut row = vec![
        r.episodes.to_string(),
        r.successes.to_string(),
        io::cell(Some(r.success_rate)),
        io::cell(Some(r.grasp_rate)),
        io::cell(Some(r.mean_length)),
    ];
    for c in &r.conditional {
        header.push(format!("cond_{}", c.stage));
        row.push(io::cell(c.percent));
    }
    (header, vec![row])
}

fn eval(a: &EvalArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let spec = require_spec(&a.task)?;
    let seeds = parse_seeds(&a.seed)?;
    let report = if a.stochastic {
        if seeds.len() != 1 {
            return Err(Error::Config("--stochastic takes a single sampling seed".into()));
        }
        evaluate_sampled(&ck.policy, &spec, a.episodes, seeds[0], exec(a.sequential))?
    } else {
        evaluate(&ck.policy, &spec, a.episodes, seeds, exec(a.sequential))?
    };
    if let Some(out) = &a.out {
        let (h, rows) = report_csv(&report);
        io::write_csv(out, &h, &rows)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn annotate(a: &AnnotateArgs) -> Result<(), Error> {
    let spec = task_spec(&a.task)?;
    let summary = pipeline::annotate(&a.inputs, &a.out, spec.as_ref())?;
    println!("trajectories={} successes={}", summary.trajectories, summary.successes);
    for t in &summary.tallies {
        println!("{} {} present={} completed={}", t.task, t.stage, t.present, t.completed);
    }
    Ok(())
}

fn oracle_check(a: &OracleArgs) -> Result<(), Error> {
    let checks = run_oracle(a.tol)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.passed(value_shift_tol(a.tol));
        println!(
            "{} {} mismatched_states={} max_q_discrepancy={:e} max_value_shift_error={:e}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.mismatched_states,
            c.max_q_discrepancy,
            c.max_value_shift_error
        );
        if !ok {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("argmax invariance failed for {}", failed.join(", "))))
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::DemoGen(a) => demo_gen(a),
        Command::PairGen(a) => pair_gen(a),
        Command::Sft(a) => run(a, Some(Phase::Sft)),
        Command::Tpo(a) => run(a, Some(Phase::Tpo)),
        Command::StaTpo(a) => run(a, Some(Phase::StaTpo)),
        Command::Ppo(a) => run(a, Some(Phase::Ppo)),
        Command::StaPpo(a) => run(a, Some(Phase::StaPpo)),
        Command::Ipi(a) => run(a, None),
        Command::Eval(a) => eval(a),
        Command::Annotate(a) => annotate(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
