//! Rollout collection and the IGPO / GRPO-sparse training step.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{expert_actions, generate_task, EnvError, EnvState, StepOutcome, Task, World};
use crate::eval::browse_ratio_pooled;
use crate::grammar::{validate_turn_format, END};
use crate::objective::{
    adam_step, grpo_sparse_advantages, reduce_terms, sft_loss, trajectory_terms, AdamState, Algorithm, OptConfig,
    OptError, TokenBatch, TokenRecord,
};
use crate::pipeline::{judge_correctness, RuleJudge};
use crate::policy::{gt_logprob, sample_turn, Gradient, PolicyError, PolicyParams, SampledTurn};
use crate::reward::{
    broadcast_to_tokens, compute_batch_rewards, DeltaMode, RewardConfig, RewardError, RewardInput, RewardTrace,
};
use crate::rng::{stream_rng, stream_seed};
use crate::traj::{serialize, Action, ActionKind, TokenizedView, TrajError, Trajectory, Turn};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step sink failed: {0}")]
    Sink(String),
}

/// Flat training configuration. Field names double as the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Directory of task files to train on; generated from `seed` when absent.
    /// Resolved by the caller, the core only reads the generation fields.
    pub tasks: Option<String>,
    pub hops: usize,
    pub task_count: usize,
    pub corpus_size: usize,
    pub groups_per_step: usize,
    pub group_size: usize,
    pub step_budget: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_samples: usize,

    pub gamma: f64,
    pub lambda_fmt: f64,
    pub browse_aware: bool,
    pub ig_scale: bool,
    pub eta: f64,
    pub s_max: f64,
    pub sigma_floor: f64,
    pub delta_mode: DeltaMode,

    pub algorithm: Algorithm,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    /// Rescale the descent gradient to at most this norm; 0 disables.
    pub max_grad_norm: f64,

    pub feature_dim: usize,
    pub window: usize,
    pub temperature: f64,
    /// Full-batch SFT steps on expert demonstrations before RL; 0 starts from
    /// the uniform policy.
    pub sft_steps: usize,
    pub sft_learning_rate: f64,
    pub sft_tasks: SftTasks,
    /// Size of the held-out demonstration pool when `sft_tasks` is `heldout`.
    pub sft_task_count: usize,
}

/// Where SFT demonstrations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftTasks {
    /// Expert runs on the RL training tasks.
    #[default]
    Train,
    /// Expert runs on a separate pool of `sft_task_count` tasks.
    Heldout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let r = RewardConfig::default();
        let o = OptConfig::default();
        TrainConfig {
            seed: 0,
            tasks: None,
            hops: 2,
            task_count: 8,
            corpus_size: 10,
            groups_per_step: 2,
            group_size: 8,
            step_budget: 12,
            total_steps: 300,
            eval_every: 0,
            eval_samples: 8,
            gamma: r.gamma,
            lambda_fmt: r.lambda_fmt,
            browse_aware: r.browse_aware,
            ig_scale: r.ig_scale,
            eta: r.eta,
            s_max: r.s_max,
            sigma_floor: r.sigma_floor,
            delta_mode: r.delta_mode,
            algorithm: o.algorithm,
            clip_eps: o.clip_eps,
            kl_beta: o.kl_beta,
            learning_rate: o.learning_rate,
            max_grad_norm: 0.0,
            feature_dim: crate::policy::DEFAULT_FEATURE_DIM,
            window: crate::policy::DEFAULT_WINDOW,
            temperature: 1.0,
            sft_steps: 12,
            sft_learning_rate: 0.05,
            sft_tasks: SftTasks::Train,
            sft_task_count: 8,
        }
    }
}

impl TrainConfig {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            lambda_fmt: self.lambda_fmt,
            gamma: self.gamma,
            eta: self.eta,
            s_max: self.s_max,
            browse_aware: self.browse_aware,
            ig_scale: self.ig_scale,
            sigma_floor: self.sigma_floor,
            delta_mode: self.delta_mode,
            ..RewardConfig::default()
        }
    }

    pub fn opt_config(&self) -> OptConfig {
        OptConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            learning_rate: self.learning_rate,
            algorithm: self.algorithm,
        }
    }

    /// Trajectories per step, the batch IG-Scale is computed over.
    pub fn batch_size(&self) -> usize {
        self.groups_per_step * self.group_size
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.groups_per_step == 0 || self.group_size == 0 {
            return bad("groups_per_step and group_size must be positive");
        }
        if self.step_budget == 0 {
            return bad("step_budget must be positive");
        }
        if self.task_count == 0 {
            return bad("task_count must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.feature_dim == 0 || self.window == 0 {
            return bad("feature_dim and window must be positive");
        }
        if self.sft_steps > 0 && (self.sft_task_count == 0 || self.sft_learning_rate.is_nan() || self.sft_learning_rate <= 0.0) {
            return bad("sft needs tasks and a positive learning rate");
        }
        self.opt_config().validate()?;
        Ok(())
    }
}

/// A task with its own corpus and index.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub world: World,
    pub task: Task,
}

impl TaskInstance {
    /// Indexes `corpus` and checks the task against it.
    pub fn new(corpus: crate::env::Corpus, task: Task) -> Result<Self, TrainError> {
        task.check(&corpus)?;
        Ok(TaskInstance { world: World::new(corpus)?, task })
    }
}

/// Seed of the `i`-th task drawn from a named pool.
pub fn task_seed(master: u64, pool: &str, i: usize) -> u64 {
    stream_seed(master, &format!("{pool}:{i}"))
}

/// `count` tasks generated from seeds of the named pool.
pub fn task_pool(master: u64, pool: &str, count: usize, hops: usize, corpus_size: usize) -> Result<Vec<TaskInstance>, TrainError> {
    (0..count)
        .map(|i| {
            let (corpus, task) = generate_task(task_seed(master, pool, i), hops, corpus_size)?;
            Ok(TaskInstance { world: World::new(corpus)?, task })
        })
        .collect()
}

/// Maps a function over items, returning results in input order. Lets the
/// std side plug in a thread pool without changing any result.
pub trait Executor {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }
}

/// Which ground-truth log-probability checkpoints a rollout records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    None,
    EveryTurn,
    BrowseOnly,
}

impl CheckpointMode {
    pub fn for_config(cfg: &RewardConfig, algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::GrpoSparse => CheckpointMode::None,
            Algorithm::Igpo if cfg.browse_aware && cfg.delta_mode == DeltaMode::PreviousBrowse => {
                CheckpointMode::BrowseOnly
            }
            Algorithm::Igpo => CheckpointMode::EveryTurn,
        }
    }
}

/// One sampled episode with everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Sampled agent tokens of each turn, with contexts and behaviour log-probabilities.
    pub turn_tokens: Vec<SampledTurn>,
    /// `checkpoints[t]`: ground-truth log-probability after turn `t`, for `t < T`.
    pub checkpoints: Vec<Option<f64>>,
    pub outcome: f64,
}

impl Rollout {
    pub fn correct(&self) -> bool {
        self.outcome > 0.5
    }

    pub fn reward_input(&self) -> RewardInput {
        let turns = &self.trajectory.turns;
        let mut checkpoints = self.checkpoints.clone();
        checkpoints.resize(turns.len(), None);
        RewardInput {
            kinds: turns.iter().map(|t| if t.format_valid { t.action.kind() } else { ActionKind::Malformed }).collect(),
            format_valid: turns.iter().map(|t| t.format_valid).collect(),
            checkpoints,
            outcome: self.outcome,
        }
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.turn_tokens.iter().map(|t| t.tokens.len()).collect()
    }

    /// Half-open agent-token spans of each turn in the flat per-trajectory token list.
    pub fn agent_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.turn_tokens
            .iter()
            .map(|t| {
                let span = (start, start + t.tokens.len());
                start = span.1;
                span
            })
            .collect()
    }
}

fn encode(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>, TrainError> {
    vocab.encode(text).map_err(|w| TrainError::UnknownWord(w.to_string()))
}

/// Samples one episode from `params`.
pub fn rollout_episode<R: Rng>(
    params: &PolicyParams,
    vocab: &Vocabulary,
    instance: &TaskInstance,
    budget: usize,
    mode: CheckpointMode,
    rng: &mut R,
) -> Result<Rollout, TrainError> {
    let end = vocab.id(END).ok_or_else(|| TrainError::UnknownWord(END.to_string()))?;
    let gt = instance.task.ground_truth();
    let mut env = EnvState::new(&instance.world, &instance.task, budget);
    let mut history = encode(vocab, &instance.task.query)?;
    let mut checkpoints = Vec::new();
    checkpoints.push(match mode {
        CheckpointMode::None => None,
        _ => Some(gt_logprob(params, vocab, &history, &gt)?),
    });
    let mut turn_tokens = Vec::new();
    loop {
        let sampled = sample_turn(params, &history, end, rng)?;
        let text = vocab.decode(&sampled.tokens);
        history.extend_from_slice(&sampled.tokens);
        turn_tokens.push(sampled);
        let turn = match validate_turn_format(&text) {
            (true, Some(action)) => Turn::new(0, action, None),
            _ => Turn::new(0, Action::Malformed { text }, None),
        };
        let kind = turn.action.kind();
        match env.step(turn)? {
            StepOutcome::Terminal(_) => break,
            StepOutcome::Observation(obs) => {
                history.extend(encode(vocab, &obs)?);
                let want = match mode {
                    CheckpointMode::None => false,
                    CheckpointMode::EveryTurn => true,
                    CheckpointMode::BrowseOnly => kind == ActionKind::Browse && env.history.turns.last().is_some_and(|t| t.format_valid),
                };
                checkpoints.push(if want { Some(gt_logprob(params, vocab, &history, &gt)?) } else { None });
            }
        }
    }
    let trajectory = env.into_trajectory();
    let correct = judge_correctness(&trajectory, &RuleJudge).unwrap_or(false);
    Ok(Rollout { trajectory, turn_tokens, checkpoints, outcome: if correct { 1.0 } else { 0.0 } })
}

/// `G` rollouts on one task; trajectory `i` of group `g` at `step` uses the
/// stream `rollout:{step}:{g}:{i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_index: usize,
    pub rollouts: Vec<Rollout>,
}

#[allow(clippy::too_many_arguments)]
pub fn rollout_group<E: Executor>(
    params: &PolicyParams,
    vocab: &Vocabulary,
    pool: &[TaskInstance],
    task_index: usize,
    seed: u64,
    stream_prefix: &str,
    group_size: usize,
    budget: usize,
    mode: CheckpointMode,
    exec: &E,
) -> Result<RolloutGroup, TrainError> {
    let ids: Vec<usize> = (0..group_size).collect();
    let rollouts = exec
        .map(&ids, |&i| {
            let mut rng = stream_rng(seed, &format!("{stream_prefix}:{i}"));
            rollout_episode(params, vocab, &pool[task_index], budget, mode, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutGroup { task_index, rollouts })
}

/// Tasks for each group of a step, drawn from the `data:{step}` stream.
pub fn step_tasks(cfg: &TrainConfig, step: usize, pool_len: usize) -> Vec<usize> {
    let mut rng = stream_rng(cfg.seed, &format!("data:{step}"));
    (0..cfg.groups_per_step).map(|_| rng.gen_range(0..pool_len)).collect()
}

/// Samples every group of one training step.
pub fn collect_groups<E: Executor>(
    params: &PolicyParams,
    vocab: &Vocabulary,
    pool: &[TaskInstance],
    cfg: &TrainConfig,
    step: usize,
    exec: &E,
) -> Result<Vec<RolloutGroup>, TrainError> {
    let mode = CheckpointMode::for_config(&cfg.reward_config(), cfg.algorithm);
    let tasks = step_tasks(cfg, step, pool.len());
    let jobs: Vec<(usize, usize, usize)> =
        tasks.iter().enumerate().flat_map(|(g, &t)| (0..cfg.group_size).map(move |i| (g, i, t))).collect();
    let results = exec.map(&jobs, |&(g, i, t)| {
        let mut rng = stream_rng(cfg.seed, &format!("rollout:{step}:{g}:{i}"));
        rollout_episode(params, vocab, &pool[t], cfg.step_budget, mode, &mut rng)
    });
    let mut it = results.into_iter();
    tasks
        .iter()
        .map(|&t| {
            let rollouts = it.by_ref().take(cfg.group_size).collect::<Result<Vec<_>, _>>()?;
            Ok(RolloutGroup { task_index: t, rollouts })
        })
        .collect()
}

/// Per-token advantages, reward traces and IG scale of one batch.
pub type IgpoAdvantages = (Vec<Vec<f64>>, Vec<RewardTrace>, Option<f64>);

/// Per-token IGPO advantages of every trajectory (flattened in group order),
/// the reward traces, and the IG scale.
pub fn igpo_token_advantages(
    groups: &[RolloutGroup],
    cfg: &RewardConfig,
) -> Result<IgpoAdvantages, TrainError> {
    let inputs: Vec<Vec<RewardInput>> =
        groups.iter().map(|g| g.rollouts.iter().map(Rollout::reward_input).collect()).collect();
    let (traces, s) = compute_batch_rewards(&inputs, cfg)?;
    let advantages = groups
        .iter()
        .flat_map(|g| g.rollouts.iter())
        .zip(&traces)
        .map(|(r, tr)| broadcast_to_tokens(&tr.returns(), &r.agent_spans()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((advantages, traces, s))
}

/// Per-token GRPO-sparse advantages, flattened in group order.
pub fn grpo_token_advantages(groups: &[RolloutGroup], sigma_floor: f64) -> Vec<Vec<f64>> {
    groups
        .iter()
        .flat_map(|g| {
            let outcomes: Vec<f64> = g.rollouts.iter().map(|r| r.outcome).collect();
            let counts: Vec<usize> = g.rollouts.iter().map(|r| r.turn_tokens.iter().map(|t| t.tokens.len()).sum()).collect();
            grpo_sparse_advantages(&outcomes, &counts, sigma_floor)
        })
        .collect()
}

/// Token records with stored behaviour log-probabilities and the given advantages.
pub fn token_batches(groups: &[RolloutGroup], advantages: &[Vec<f64>]) -> Vec<TokenBatch> {
    groups
        .iter()
        .flat_map(|g| g.rollouts.iter())
        .zip(advantages)
        .enumerate()
        .map(|(i, (r, adv))| {
            let mut tokens = Vec::new();
            let mut a = adv.iter();
            for (turn, st) in r.turn_tokens.iter().enumerate() {
                for ((ctx, &tok), &lp) in st.contexts.iter().zip(&st.tokens).zip(&st.logprobs) {
                    tokens.push(TokenRecord {
                        context: ctx.clone(),
                        token: tok,
                        old_logprob: lp,
                        advantage: *a.next().expect("advantages cover every agent token"),
                        turn,
                    });
                }
            }
            TokenBatch { trajectory: i, tokens }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_outcome: f64,
    pub success_rate: f64,
    #[serde(rename = "mean_J")]
    pub mean_j: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s: Option<f64>,
    pub format_error_rate: f64,
    pub mean_turns: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub browse_ratio: Option<f64>,
    pub clip_fraction: f64,
    pub kl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_success: Option<f64>,
}

/// Mutable training state: current policy, optimizer and KL reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub adam: AdamState,
    pub reference: Option<PolicyParams>,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: PolicyParams, cfg: &TrainConfig) -> Self {
        let reference = (cfg.kl_beta > 0.0).then(|| params.snapshot());
        TrainState { adam: AdamState::new(params.theta.len()), params, reference, step: 0 }
    }
}

fn batch_stats(groups: &[RolloutGroup]) -> (f64, f64, f64, Option<f64>) {
    let rollouts: Vec<&Rollout> = groups.iter().flat_map(|g| g.rollouts.iter()).collect();
    let n = rollouts.len().max(1) as f64;
    let mean_outcome = rollouts.iter().map(|r| r.outcome).sum::<f64>() / n;
    let turns: usize = rollouts.iter().map(|r| r.trajectory.turns.len()).sum();
    let invalid: usize = rollouts.iter().map(|r| r.trajectory.turns.iter().filter(|t| !t.format_valid).count()).sum();
    let counts: Vec<(usize, usize)> = rollouts
        .iter()
        .map(|r| (r.trajectory.count_kind(ActionKind::Search), r.trajectory.count_kind(ActionKind::Browse)))
        .collect();
    let fer = if turns == 0 { 0.0 } else { invalid as f64 / turns as f64 };
    (mean_outcome, fer, turns as f64 / n, browse_ratio_pooled(&counts))
}

/// One update. On error the state is left untouched.
pub fn train_step<E: Executor>(
    state: &mut TrainState,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
    exec: &E,
) -> Result<(StepMetrics, Vec<RewardTrace>), TrainError> {
    let opt = cfg.opt_config();
    let (advantages, traces, s) = match cfg.algorithm {
        Algorithm::Igpo => igpo_token_advantages(groups, &cfg.reward_config())?,
        Algorithm::GrpoSparse => (grpo_token_advantages(groups, cfg.sigma_floor), Vec::new(), None),
    };
    let batches = token_batches(groups, &advantages);
    let params = &state.params;
    let reference = state.reference.as_ref();
    let terms = exec
        .map(&batches, |b| trajectory_terms(params, reference, b, &opt))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let out = reduce_terms(params, &terms, &opt)?;
    let grad_norm = out.gradient.norm();
    let mut descent: Gradient = out.gradient;
    descent.scale(-1.0);
    if cfg.max_grad_norm > 0.0 && grad_norm > cfg.max_grad_norm {
        descent.scale(cfg.max_grad_norm / grad_norm);
    }
    adam_step(&mut state.params, &descent, &mut state.adam, opt.learning_rate)?;
    let (mean_outcome, format_error_rate, mean_turns, browse_ratio) = batch_stats(groups);
    let metrics = StepMetrics {
        step: state.step,
        mean_outcome,
        success_rate: mean_outcome,
        mean_j: out.value,
        grad_norm,
        s,
        format_error_rate,
        mean_turns,
        browse_ratio,
        clip_fraction: out.clip_fraction,
        kl: out.kl,
        eval_success: None,
    };
    state.step += 1;
    Ok((metrics, traces))
}

/// Expert demonstrations for the pool, serialized for SFT.
pub fn expert_demos(pool: &[TaskInstance], vocab: &Vocabulary, budget: usize) -> Result<Vec<TokenizedView>, TrainError> {
    pool.iter()
        .map(|inst| {
            let mut env = EnvState::new(&inst.world, &inst.task, budget);
            for a in expert_actions(&inst.task) {
                if env.is_finished() {
                    break;
                }
                env.step_action(String::new(), a)?;
            }
            Ok(serialize(&env.into_trajectory(), vocab)?)
        })
        .collect()
}

/// Full-batch SFT on `demos` with mean per-token loss. Returns the loss
/// before each step.
pub fn sft_warm_start<E: Executor>(
    params: &mut PolicyParams,
    demos: &[TokenizedView],
    steps: usize,
    lr: f64,
    exec: &E,
) -> Result<Vec<f64>, TrainError> {
    let mut adam = AdamState::new(params.theta.len());
    let tokens: usize = demos.iter().map(TokenizedView::agent_token_count).sum();
    let inv = 1.0 / tokens.max(1) as f64;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let p = &*params;
        let parts = exec.map(demos, |d| sft_loss(p, d)).into_iter().collect::<Result<Vec<_>, _>>()?;
        let mut grad = Gradient::zeros_like(params);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grad.add_scaled(g, inv);
        }
        losses.push(loss * inv);
        adam_step(params, &grad, &mut adam, lr)?;
    }
    Ok(losses)
}

/// The generated training pool of a config.
pub fn train_pool(cfg: &TrainConfig) -> Result<Vec<TaskInstance>, TrainError> {
    task_pool(cfg.seed, "train", cfg.task_count, cfg.hops, cfg.corpus_size)
}

/// Initial policy: zeros, then optional SFT on expert demonstrations.
pub fn initial_policy<E: Executor>(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[TaskInstance],
    exec: &E,
) -> Result<PolicyParams, TrainError> {
    let mut params = PolicyParams::zeros(cfg.feature_dim, vocab.len(), cfg.window, cfg.temperature)?;
    if cfg.sft_steps > 0 {
        let heldout;
        let pool = match cfg.sft_tasks {
            SftTasks::Train => train,
            SftTasks::Heldout => {
                heldout = task_pool(cfg.seed, "sft", cfg.sft_task_count, cfg.hops, cfg.corpus_size)?;
                &heldout[..]
            }
        };
        let demos = expert_demos(pool, vocab, cfg.step_budget)?;
        sft_warm_start(&mut params, &demos, cfg.sft_steps, cfg.sft_learning_rate, exec)?;
    }
    Ok(params)
}

/// Output of [`train_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial: PolicyParams,
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Everything a step sink may want to persist.
pub struct StepReport<'a> {
    pub metrics: &'a StepMetrics,
    pub state: &'a TrainState,
    pub traces: &'a [RewardTrace],
}

/// Runs `cfg.total_steps` updates on `pool`. `sink` sees every step after it
/// is applied; an error from it stops training.
pub fn train_loop<E, F>(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    pool: &[TaskInstance],
    exec: &E,
    mut sink: F,
) -> Result<TrainOutcome, TrainError>
where
    E: Executor,
    F: FnMut(StepReport<'_>) -> Result<(), String>,
{
    cfg.validate()?;
    if pool.is_empty() {
        return Err(TrainError::InvalidConfig("empty task pool".into()));
    }
    let initial = initial_policy(cfg, vocab, pool, exec)?;
    let mut state = TrainState::new(initial.clone(), cfg);
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let groups = collect_groups(&state.params, vocab, pool, cfg, step, exec)?;
        let (mut m, traces) = train_step(&mut state, &groups, cfg, exec)?;
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            m.eval_success =
                Some(success_rate(&state.params, vocab, pool, cfg.eval_samples, cfg.seed, cfg.step_budget, exec)?);
        }
        sink(StepReport { metrics: &m, state: &state, traces: &traces }).map_err(TrainError::Sink)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { initial, state, metrics })
}

/// Fraction of `n` samples per task answered correctly, on the `eval` streams.
pub fn success_rate<E: Executor>(
    params: &PolicyParams,
    vocab: &Vocabulary,
    pool: &[TaskInstance],
    n: usize,
    seed: u64,
    budget: usize,
    exec: &E,
) -> Result<f64, TrainError> {
    let jobs: Vec<(usize, usize)> = (0..pool.len()).flat_map(|t| (0..n).map(move |i| (t, i))).collect();
    let results = exec.map(&jobs, |&(t, i)| {
        let mut rng = stream_rng(seed, &format!("eval:{t}:{i}"));
        rollout_episode(params, vocab, &pool[t], budget, CheckpointMode::None, &mut rng).map(|r| r.outcome)
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(if outcomes.is_empty() { 0.0 } else { outcomes.iter().sum::<f64>() / outcomes.len() as f64 })
}
