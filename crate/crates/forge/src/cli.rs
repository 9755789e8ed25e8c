//! The `igpo-forge` command line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use igpo_core::env::{expert_actions, world_vocabulary, EnvState};
use igpo_core::eval::{evaluate, summarize, EvalRecord, EvalSummary};
use igpo_core::pipeline::{
    clean_record, finish_pipeline, Cleaned, Judge, JudgeUnavailable, Message, PipelineConfig, RawRecord,
    ResampleWeights, Role, RuleJudge, SchemaError, ToolCall,
};
use igpo_core::rng::stream_seed;
use igpo_core::train::{task_pool, train_loop, StepMetrics, TaskInstance, TrainConfig};
use igpo_core::traj::{turn_stats_with, TurnBuckets};
use igpo_core::{Action, Trajectory};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::exec::RayonExec;
use crate::io;
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "igpo-forge", version, about = "Data curation, training and evaluation for search-and-browse agents")]
pub struct Cli {
    /// Progress messages on standard error.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    Rule,
    Plugin,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Align, prune, de-duplicate and judge raw trajectories.
    Clean {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = JudgeKind::Rule)]
        judge: JudgeKind,
        /// Program run as `<cmd> <answer> <ground truth>` by the plugin judge;
        /// exit 0 accepts, 1 rejects, anything else means unavailable.
        #[arg(long)]
        judge_cmd: Option<PathBuf>,
        /// Where to write trajectories the judge could not rule on.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long, default_value = "1,2,5")]
        weights: String,
        #[arg(long, default_value = "50,100")]
        buckets: String,
    },
    /// Repeat trajectories by turn-count bucket.
    Resample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1,2,5")]
        weights: String,
        #[arg(long, default_value = "50,100")]
        buckets: String,
    },
    /// Generate multi-hop tasks with their corpora.
    GenTasks {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        hops: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        corpus_size: usize,
        /// Also write expert demonstrations in the raw chat format.
        #[arg(long)]
        raw_demos: Option<PathBuf>,
    },
    /// Train a policy from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dump per-step reward traces under `reward_traces/`.
        #[arg(long)]
        traces: bool,
    },
    /// Evaluate a checkpoint with Pass@K and browse ratios.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value = "1,2,4,8,16")]
        k: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        budget: usize,
        /// Independent evaluation runs; Pass@K is reported per run, averaged,
        /// and over the pooled samples.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Second checkpoint (for example the warm start) evaluated on the
        /// same samples; the report then carries the Pass@K gap per k.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Render a metrics log as a table.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        every: Option<usize>,
    },
}

impl From<LogLevel> for log::LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        }
    }
}

/// Parses `argv` and runs the command. Exit codes: 0 success, 1 domain
/// error, 2 usage error.
pub fn dispatch<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let _ = env_logger::Builder::new().filter_level(cli.log_level.into()).format_timestamp(None).try_init();
    match cli.command {
        Cmd::Clean { input, out, report, judge, judge_cmd, held_out, weights, buckets } => {
            let cfg = PipelineConfig { weights: parse_weights(&weights)?, buckets: parse_buckets(&buckets)?, ..PipelineConfig::default() };
            let judge: Box<dyn Judge> = match (judge, judge_cmd) {
                (JudgeKind::Rule, _) => Box::new(RuleJudge),
                (JudgeKind::Plugin, Some(cmd)) => Box::new(CommandJudge { program: cmd }),
                (JudgeKind::Plugin, None) => bail!("--judge plugin needs --judge-cmd"),
            };
            clean(&input, &out, &report, held_out.as_deref(), judge.as_ref(), &cfg)
        }
        Cmd::Resample { input, out, weights, buckets } => {
            let weights = parse_weights(&weights)?;
            let buckets = parse_buckets(&buckets)?;
            let data = io::read_trajectories(&input)?;
            let out_set = igpo_core::pipeline::resample_by_turns(&data, weights, buckets);
            io::write_jsonl(&out, &out_set)?;
            let summary = ResampleSummary {
                input_count: data.len(),
                resampled_total: out_set.len(),
                bucket_shares_before: turn_stats_with(&data, buckets).shares,
                bucket_shares_after: turn_stats_with(&out_set, buckets).shares,
            };
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Cmd::GenTasks { seed, hops, count, out, corpus_size, raw_demos } => {
            gen_tasks(seed, hops, count, corpus_size, &out, raw_demos.as_deref())
        }
        Cmd::Train { config, out, seed, traces } => {
            let mut cfg: TrainConfig = io::read_json(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            train(&cfg, config.parent().unwrap_or(Path::new(".")), &out, traces)
        }
        Cmd::Eval { checkpoint, tasks, n, k, out, seed, budget, runs, baseline } => {
            let ks = parse_list::<usize>(&k, "k")?;
            let opts = EvalOpts { n, ks, seed, budget, runs };
            eval(&checkpoint, baseline.as_deref(), &tasks, &opts, &out)
        }
        Cmd::Report { metrics, every } => {
            let rows: Vec<StepMetrics> = io::read_jsonl(&metrics)?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(report::render_table(&rows, every.unwrap_or(1)).as_bytes())?;
            Ok(())
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} value `{p}` in `{s}`")))
        .collect()
}

pub fn parse_weights(s: &str) -> Result<ResampleWeights> {
    match parse_list::<u32>(s, "weight")?.as_slice() {
        &[a, b, c] => Ok(ResampleWeights::new(a, b, c)?),
        _ => bail!("--weights needs three comma-separated integers, got `{s}`"),
    }
}

pub fn parse_buckets(s: &str) -> Result<TurnBuckets> {
    match parse_list::<usize>(s, "bucket")?.as_slice() {
        &[a, b] if a < b => Ok(TurnBuckets { short_max: a, mid_max: b }),
        _ => bail!("--buckets needs two increasing integers, got `{s}`"),
    }
}

#[derive(Serialize)]
struct ResampleSummary {
    input_count: usize,
    resampled_total: usize,
    bucket_shares_before: [f64; 3],
    bucket_shares_after: [f64; 3],
}

/// External judge: `program <answer> <ground truth>`.
pub struct CommandJudge {
    pub program: PathBuf,
}

impl Judge for CommandJudge {
    fn judge(&self, answer: &str, ground_truth: &str) -> Result<bool, JudgeUnavailable> {
        let status = Command::new(&self.program)
            .arg(answer)
            .arg(ground_truth)
            .status()
            .map_err(|e| JudgeUnavailable(format!("{}: {e}", self.program.display())))?;
        match status.code() {
            Some(0) => Ok(true),
            Some(1) => Ok(false),
            other => Err(JudgeUnavailable(format!("{} exited with {other:?}", self.program.display()))),
        }
    }
}

fn clean(
    input: &Path,
    out: &Path,
    report_path: &Path,
    held_out: Option<&Path>,
    judge: &dyn Judge,
    cfg: &PipelineConfig,
) -> Result<()> {
    let exec = RayonExec::from_env()?;
    let lines = io::read_lines(input)?;
    let allowed = cfg.allowed_tools.clone();
    let cleaned: Vec<Cleaned> = igpo_core::train::Executor::map(&exec, &lines, |(n, line)| {
        match serde_json::from_str::<RawRecord>(line) {
            Ok(rec) => clean_record(&rec, &allowed),
            Err(e) => Cleaned::SchemaFailed(SchemaError::Unreadable(format!("line {n}: {e}"))),
        }
    });
    let output = finish_pipeline(cleaned, judge, cfg);
    for (pos, msg) in &output.errors {
        log::info!("record {pos}: {msg}");
    }
    io::write_jsonl(out, &output.retained)?;
    io::write_json(report_path, &output.report)?;
    if let Some(path) = held_out {
        io::write_jsonl(path, &output.held_out)?;
    }
    log::info!(
        "{} records, {} valid, {} retained",
        output.report.input_count, output.report.valid_after_cleaning, output.report.retained_after_judge
    );
    Ok(())
}

/// Converts an expert episode into the raw chat format.
pub fn to_raw_record(id: String, trajectory: &Trajectory) -> RawRecord {
    let mut messages = vec![Message { role: Role::User, content: trajectory.query.clone(), tool_call: None, answer: None }];
    for turn in &trajectory.turns {
        let (tool_call, answer) = match &turn.action {
            Action::Search { queries } => {
                (Some(ToolCall { name: "search".into(), arguments: queries.clone(), goal: None }), None)
            }
            Action::Browse { urls, goal } => {
                (Some(ToolCall { name: "visit".into(), arguments: urls.clone(), goal: Some(goal.clone()) }), None)
            }
            Action::Answer { text } => (None, Some(text.clone())),
            Action::Tool { name, arguments } => (
                Some(ToolCall {
                    name: name.clone(),
                    arguments: arguments.split_whitespace().map(str::to_string).collect(),
                    goal: None,
                }),
                None,
            ),
            Action::Malformed { text } => (None, Some(text.clone())),
        };
        messages.push(Message { role: Role::Assistant, content: turn.reasoning.clone(), tool_call, answer });
        if let Some(obs) = &turn.observation {
            messages.push(Message { role: Role::Tool, content: obs.clone(), tool_call: None, answer: None });
        }
    }
    RawRecord {
        id: Some(id),
        messages,
        ground_truth: trajectory.ground_truth.as_ref().map(|g| g.answer_tokens.join(" ")),
    }
}

fn gen_tasks(seed: u64, hops: usize, count: usize, corpus_size: usize, out: &Path, raw_demos: Option<&Path>) -> Result<()> {
    let pool = task_pool(seed, "train", count, hops, corpus_size)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut demos = Vec::new();
    for (i, inst) in pool.iter().enumerate() {
        io::write_task(&io::task_path(out, i), &inst.world.corpus, &inst.task)?;
        if raw_demos.is_some() {
            let mut env = EnvState::new(&inst.world, &inst.task, igpo_core::traj::DEFAULT_STEP_BUDGET);
            for a in expert_actions(&inst.task) {
                env.step_action(String::new(), a)?;
            }
            demos.push(to_raw_record(format!("task_{i:04}"), &env.into_trajectory()));
        }
    }
    if let Some(path) = raw_demos {
        io::write_jsonl(path, &demos)?;
    }
    log::info!("wrote {count} tasks to {}", out.display());
    Ok(())
}

/// Recorded next to the outputs of a training run.
#[derive(Serialize)]
struct RunManifest<'a> {
    seed: u64,
    vocab_hash: String,
    config: &'a TrainConfig,
}

pub fn train(cfg: &TrainConfig, config_dir: &Path, out: &Path, traces: bool) -> Result<()> {
    let exec = RayonExec::from_env()?;
    let vocab = world_vocabulary();
    let pool: Vec<TaskInstance> = match &cfg.tasks {
        Some(dir) => {
            let p = Path::new(dir);
            io::read_tasks(&if p.is_absolute() { p.to_path_buf() } else { config_dir.join(p) })?
        }
        None => igpo_core::train::train_pool(cfg)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let hash = vocab.fingerprint();
    io::write_json(&out.join("run.json"), &RunManifest { seed: cfg.seed, vocab_hash: format!("{hash:016x}"), config: cfg })?;
    let mut metrics = io::create(&out.join("metrics.jsonl"))?;
    let trace_dir = out.join("reward_traces");
    if traces {
        std::fs::create_dir_all(&trace_dir)?;
    }
    let ckpt = |state: &igpo_core::train::TrainState| Checkpoint {
        seed: cfg.seed,
        step: state.step as u64,
        vocab_hash: hash,
        params: state.params.clone(),
        adam: Some(state.adam.clone()),
    };
    let outcome = train_loop(cfg, &vocab, &pool, &exec, |rep| {
        let io_err = |e: std::io::Error| e.to_string();
        serde_json::to_writer(&mut metrics, rep.metrics).map_err(|e| e.to_string())?;
        metrics.write_all(b"\n").map_err(io_err)?;
        metrics.flush().map_err(io_err)?;
        if traces {
            let rows: Vec<TraceRow> = rep
                .traces
                .iter()
                .enumerate()
                .map(|(i, t)| TraceRow { step: rep.metrics.step, trajectory: i, turns: &t.turns })
                .collect();
            io::write_jsonl(&trace_dir.join(format!("step_{:05}.jsonl", rep.metrics.step)), &rows)
                .map_err(|e| format!("{e:#}"))?;
        }
        if cfg.eval_every > 0 && rep.state.step % cfg.eval_every == 0 {
            ckpt(rep.state).write(&out.join("checkpoint.bin")).map_err(|e| e.to_string())?;
        }
        let m = rep.metrics;
        log::info!("step {} success {:.3} J {:.4} fer {:.3}", m.step, m.success_rate, m.mean_j, m.format_error_rate);
        Ok(())
    })?;
    let initial = Checkpoint { seed: cfg.seed, step: 0, vocab_hash: hash, params: outcome.initial.clone(), adam: None };
    initial.write(&out.join("initial.bin"))?;
    ckpt(&outcome.state).write(&out.join("checkpoint.bin"))?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRow<'a> {
    step: usize,
    trajectory: usize,
    turns: &'a [igpo_core::reward::TurnReward],
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_seed: u64,
    seed: u64,
    n: usize,
    k: Vec<usize>,
    runs: usize,
    tasks: usize,
    /// Mean over runs of the per-run estimates.
    pass_at_k: BTreeMap<String, f64>,
    /// Estimated from all `n * runs` samples of each task.
    pass_at_k_pooled: BTreeMap<String, f64>,
    browse_ratio: igpo_core::eval::BrowseRatios,
    mean_turns: f64,
    success_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<BaselineComparison>,
    run_summaries: Vec<EvalSummary>,
    records: Vec<EvalRecord>,
}

#[derive(Serialize)]
struct BaselineComparison {
    pass_at_k: BTreeMap<String, f64>,
    /// `pass_at_k - baseline.pass_at_k` per k.
    gap: BTreeMap<String, f64>,
    /// Whether the gap at the smallest k exceeds the gap at the largest k.
    gap_largest_at_smallest_k: bool,
    browse_ratio: igpo_core::eval::BrowseRatios,
}

pub struct EvalOpts {
    pub n: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub budget: usize,
    pub runs: usize,
}

fn pass_map(pairs: &[(usize, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (format!("{k:03}"), *v)).collect()
}

struct EvalResult {
    mean: Vec<(usize, f64)>,
    pooled: EvalSummary,
    summaries: Vec<EvalSummary>,
    records: Vec<EvalRecord>,
}

fn eval_runs(params: &igpo_core::PolicyParams, pool: &[TaskInstance], opts: &EvalOpts, exec: &RayonExec) -> Result<EvalResult> {
    let vocab = world_vocabulary();
    let mut summaries = Vec::with_capacity(opts.runs);
    let mut pooled: Vec<EvalRecord> = Vec::new();
    for r in 0..opts.runs {
        let run_seed = if opts.runs == 1 { opts.seed } else { stream_seed(opts.seed, &format!("eval-run:{r}")) };
        let (records, summary) = evaluate(params, &vocab, pool, opts.n, &opts.ks, run_seed, opts.budget, exec)?;
        if pooled.is_empty() {
            pooled = records;
        } else {
            for (p, rec) in pooled.iter_mut().zip(records) {
                p.n += rec.n;
                p.c += rec.c;
                p.searches.extend(rec.searches);
                p.browses.extend(rec.browses);
                p.turns.extend(rec.turns);
                p.correct.extend(rec.correct);
            }
        }
        summaries.push(summary);
    }
    let pooled_summary = summarize(&pooled, &opts.ks, opts.seed)?;
    let mean = opts
        .ks
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, summaries.iter().map(|s| s.pass_at_k[j].1).sum::<f64>() / opts.runs as f64))
        .collect();
    Ok(EvalResult { mean, pooled: pooled_summary, summaries, records: pooled })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::read(path).with_context(|| format!("cannot load {}", path.display()))?;
    ckpt.check_vocab(world_vocabulary().fingerprint()).with_context(|| path.display().to_string())?;
    Ok(ckpt)
}

fn eval(checkpoint: &Path, baseline: Option<&Path>, tasks: &Path, opts: &EvalOpts, out: &Path) -> Result<()> {
    if opts.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let exec = RayonExec::from_env()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let pool = io::read_tasks(tasks)?;
    let main = eval_runs(&ckpt.params, &pool, opts, &exec)?;
    let baseline = match baseline {
        Some(path) => {
            let base = eval_runs(&load_checkpoint(path)?.params, &pool, opts, &exec)?;
            let gap: Vec<(usize, f64)> = main.mean.iter().zip(&base.mean).map(|(a, b)| (a.0, a.1 - b.1)).collect();
            let mut sorted = gap.clone();
            sorted.sort_by_key(|g| g.0);
            Some(BaselineComparison {
                pass_at_k: pass_map(&base.mean),
                gap_largest_at_smallest_k: sorted.first().map_or(0.0, |g| g.1) > sorted.last().map_or(0.0, |g| g.1),
                gap: pass_map(&gap),
                browse_ratio: base.pooled.browse_ratio,
            })
        }
        None => None,
    };
    let report = EvalReport {
        checkpoint_seed: ckpt.seed,
        seed: opts.seed,
        n: opts.n,
        k: opts.ks.clone(),
        runs: opts.runs,
        tasks: pool.len(),
        pass_at_k: pass_map(&main.mean),
        pass_at_k_pooled: pass_map(&main.pooled.pass_at_k),
        browse_ratio: main.pooled.browse_ratio,
        mean_turns: main.pooled.mean_turns,
        success_rate: main.pooled.success_rate,
        baseline,
        run_summaries: main.summaries,
        records: main.records,
    };
    io::write_json(out, &report)
}
