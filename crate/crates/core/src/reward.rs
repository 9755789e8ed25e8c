//! Turn-level reward pipeline.
//!
//! Per trajectory: information-gain (IG) rewards from ground-truth
//! log-probability checkpoints, optional browse-aware assignment, and the
//! format penalty. Per rollout group: separate standardization of the IG pool
//! and the outcome pool. Per batch: IG-Scale. Per trajectory again:
//! discounted returns, broadcast to the agent tokens of each turn.
//!
//! Everything here produces plain numbers; nothing is differentiated through.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::traj::ActionKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("missing log-probability checkpoint after turn {0}")]
    MissingCheckpoint(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("span mismatch: {returns} returns for {spans} turn spans")]
    SpanMismatch { returns: usize, spans: usize },
}

/// Baseline of a browse turn's IG difference in browse-aware mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// `logp(after browse) − logp(after previous browse, or the bare query)`.
    #[default]
    PreviousBrowse,
    /// `logp(after browse) − logp(after the turn before it)`.
    PreviousTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_fmt: f64,
    pub gamma: f64,
    pub eta: f64,
    pub delta: f64,
    pub s_max: f64,
    pub browse_aware: bool,
    pub ig_scale: bool,
    pub sigma_floor: f64,
    pub delta_mode: DeltaMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_fmt: 1.0,
            gamma: 0.95,
            eta: 0.3,
            delta: 1e-8,
            s_max: 10.0,
            browse_aware: true,
            ig_scale: true,
            sigma_floor: 1e-8,
            delta_mode: DeltaMode::PreviousBrowse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Ig,
    Outcome,
    NoReward,
}

/// One row of the per-turn reward ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnReward {
    pub t: usize,
    pub kind: RewardKind,
    pub raw: f64,
    pub format_adjusted: f64,
    pub normalized: f64,
    pub scaled: f64,
    pub discounted_return: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTrace {
    pub turns: Vec<TurnReward>,
}

impl RewardTrace {
    pub fn returns(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.discounted_return).collect()
    }
}

/// What the reward engine needs from one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardInput {
    /// Action kind per turn; malformed turns are [`ActionKind::Malformed`].
    pub kinds: Vec<ActionKind>,
    pub format_valid: Vec<bool>,
    /// `checkpoints[t]` is the ground-truth log-probability after turn `t`
    /// (index 0 is the bare query). Only the indices returned by
    /// [`required_checkpoints`] need to be present.
    pub checkpoints: Vec<Option<f64>>,
    pub outcome: f64,
}

/// IG rewards `r_t = logp_t − logp_{t−1}` for `1 ≤ t < T`, from the
/// checkpoints `logp_0 .. logp_{T−1}`.
pub fn ig_rewards(checkpoints: &[f64]) -> Result<Vec<f64>, RewardError> {
    if checkpoints.is_empty() {
        return Err(RewardError::LengthMismatch { expected: 1, found: 0 });
    }
    Ok(checkpoints.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Which checkpoints (`0..T`) a trajectory with these kinds needs. The final
/// turn never needs one.
pub fn required_checkpoints(kinds: &[ActionKind], cfg: &RewardConfig) -> Vec<bool> {
    let n = kinds.len();
    let mut need = vec![false; n.max(1)];
    need[0] = true;
    if !cfg.browse_aware {
        need.iter_mut().for_each(|x| *x = true);
        return need;
    }
    for t in 1..n {
        if kinds[t - 1] == ActionKind::Browse {
            need[t] = true;
            if cfg.delta_mode == DeltaMode::PreviousTurn {
                need[t - 1] = true;
            }
        }
    }
    need
}

/// Positions (1-based) of browse turns that carry IG, i.e. all but the last turn.
fn browse_turns(kinds: &[ActionKind]) -> impl Iterator<Item = usize> + '_ {
    let n = kinds.len();
    (1..n).filter(move |&t| kinds[t - 1] == ActionKind::Browse)
}

/// IG value of each browse turn (`t < T`) under the chosen baseline.
pub fn browse_ig_values(
    kinds: &[ActionKind],
    checkpoints: &[Option<f64>],
    mode: DeltaMode,
) -> Result<Vec<f64>, RewardError> {
    let get = |t: usize| checkpoints.get(t).copied().flatten().ok_or(RewardError::MissingCheckpoint(t));
    let mut out = Vec::new();
    let mut prev = 0usize;
    for b in browse_turns(kinds) {
        let base = match mode {
            DeltaMode::PreviousBrowse => prev,
            DeltaMode::PreviousTurn => b - 1,
        };
        out.push(get(b)? - get(base)?);
        prev = b;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TurnAssignment {
    Ig(f64),
    NoReward,
    Outcome,
}

/// Credits each browse IG value to the browse turn and every search turn
/// since the previous browse. Other non-final turns get no reward; the final
/// turn holds the outcome.
pub fn browse_aware_assign(kinds: &[ActionKind], ig_at_browse: &[f64]) -> Result<Vec<TurnAssignment>, RewardError> {
    let n = kinds.len();
    let browses: Vec<usize> = browse_turns(kinds).collect();
    if browses.len() != ig_at_browse.len() {
        return Err(RewardError::LengthMismatch { expected: browses.len(), found: ig_at_browse.len() });
    }
    let mut out = vec![TurnAssignment::NoReward; n];
    if n == 0 {
        return Ok(out);
    }
    let mut prev = 0usize;
    for (&b, &v) in browses.iter().zip(ig_at_browse) {
        for t in prev + 1..=b {
            if t == b || kinds[t - 1] == ActionKind::Search {
                out[t - 1] = TurnAssignment::Ig(v);
            }
        }
        prev = b;
    }
    out[n - 1] = TurnAssignment::Outcome;
    Ok(out)
}

/// Replaces the reward of every invalid turn by `−lambda_fmt`.
pub fn apply_format_penalty(rewards: &[f64], format_valid: &[bool], lambda_fmt: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() != format_valid.len() {
        return Err(RewardError::LengthMismatch { expected: rewards.len(), found: format_valid.len() });
    }
    Ok(rewards.iter().zip(format_valid).map(|(&r, &ok)| if ok { r } else { -lambda_fmt }).collect())
}

/// Raw and format-adjusted rewards of one trajectory.
pub fn trajectory_rewards(input: &RewardInput, cfg: &RewardConfig) -> Result<RewardTrace, RewardError> {
    let n = input.kinds.len();
    if n == 0 {
        return Err(RewardError::LengthMismatch { expected: 1, found: 0 });
    }
    if input.format_valid.len() != n {
        return Err(RewardError::LengthMismatch { expected: n, found: input.format_valid.len() });
    }
    let assignment = if cfg.browse_aware {
        let values = browse_ig_values(&input.kinds, &input.checkpoints, cfg.delta_mode)?;
        browse_aware_assign(&input.kinds, &values)?
    } else {
        let cps = (0..n)
            .map(|t| input.checkpoints.get(t).copied().flatten().ok_or(RewardError::MissingCheckpoint(t)))
            .collect::<Result<Vec<f64>, _>>()?;
        let mut a: Vec<TurnAssignment> = ig_rewards(&cps)?.into_iter().map(TurnAssignment::Ig).collect();
        a.push(TurnAssignment::Outcome);
        a
    };
    let raw: Vec<f64> = assignment
        .iter()
        .map(|a| match a {
            TurnAssignment::Ig(v) => *v,
            TurnAssignment::NoReward => 0.0,
            TurnAssignment::Outcome => input.outcome,
        })
        .collect();
    let adjusted = apply_format_penalty(&raw, &input.format_valid, cfg.lambda_fmt)?;
    let turns = assignment
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let kind = match a {
                TurnAssignment::Outcome => RewardKind::Outcome,
                TurnAssignment::Ig(_) => RewardKind::Ig,
                // A penalized turn carries a real reward and joins the IG pool.
                TurnAssignment::NoReward if !input.format_valid[i] => RewardKind::Ig,
                TurnAssignment::NoReward => RewardKind::NoReward,
            };
            TurnReward {
                t: i + 1,
                kind,
                raw: raw[i],
                format_adjusted: adjusted[i],
                normalized: 0.0,
                scaled: 0.0,
                discounted_return: 0.0,
            }
        })
        .collect();
    Ok(RewardTrace { turns })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// `(v − μ) / σ`, or all zeros when `σ < sigma_floor`.
pub fn standardize(values: &[f64], sigma_floor: f64) -> Vec<f64> {
    let (mean, std) = mean_std(values);
    if std < sigma_floor {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

fn normalize_kind(group: &mut [RewardTrace], kind: RewardKind, sigma_floor: f64) {
    let pool: Vec<f64> =
        group.iter().flat_map(|tr| tr.turns.iter()).filter(|t| t.kind == kind).map(|t| t.format_adjusted).collect();
    let normalized = standardize(&pool, sigma_floor);
    let mut it = normalized.into_iter();
    for t in group.iter_mut().flat_map(|tr| tr.turns.iter_mut()).filter(|t| t.kind == kind) {
        t.normalized = it.next().unwrap_or(0.0);
    }
}

/// Standardizes the IG pool and the outcome pool of one rollout group
/// separately. Turns without reward stay at zero.
pub fn normalize_group(group: &mut [RewardTrace], cfg: &RewardConfig) {
    for t in group.iter_mut().flat_map(|tr| tr.turns.iter_mut()) {
        t.normalized = 0.0;
    }
    normalize_kind(group, RewardKind::Ig, cfg.sigma_floor);
    normalize_kind(group, RewardKind::Outcome, cfg.sigma_floor);
}

/// `min(max(M_O, η) / (M_IG + δ), s_max)`.
pub fn ig_scale_factor(mean_abs_outcome: f64, mean_abs_ig: f64, cfg: &RewardConfig) -> f64 {
    let s = mean_abs_outcome.max(cfg.eta) / (mean_abs_ig + cfg.delta);
    s.min(cfg.s_max)
}

/// Batch-level magnitudes `(M_O, M_IG)` of normalized rewards.
pub fn batch_magnitudes(batch: &[RewardTrace]) -> (f64, f64) {
    let mut o = (0.0, 0usize);
    let mut ig = (0.0, 0usize);
    for t in batch.iter().flat_map(|tr| tr.turns.iter()) {
        match t.kind {
            RewardKind::Outcome => {
                o.0 += t.normalized.abs();
                o.1 += 1;
            }
            RewardKind::Ig => {
                ig.0 += t.normalized.abs();
                ig.1 += 1;
            }
            RewardKind::NoReward => {}
        }
    }
    let avg = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (avg(o), avg(ig))
}

/// Fills `scaled` for every turn of the batch. Returns the scale factor when
/// IG-Scale is enabled.
pub fn ig_scale(batch: &mut [RewardTrace], cfg: &RewardConfig) -> Result<Option<f64>, RewardError> {
    if batch.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let s = if cfg.ig_scale {
        let (m_o, m_ig) = batch_magnitudes(batch);
        Some(ig_scale_factor(m_o, m_ig, cfg))
    } else {
        None
    };
    for t in batch.iter_mut().flat_map(|tr| tr.turns.iter_mut()) {
        t.scaled = match (t.kind, s) {
            (RewardKind::Ig, Some(s)) => s * t.normalized,
            _ => t.normalized,
        };
    }
    Ok(s)
}

/// `R_t = Σ_{k ≥ t} γ^{k−t} r_k`, by backward recursion.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// Fills `discounted_return` from `scaled`.
pub fn fill_returns(trace: &mut RewardTrace, gamma: f64) {
    let scaled: Vec<f64> = trace.turns.iter().map(|t| t.scaled).collect();
    for (t, r) in trace.turns.iter_mut().zip(discounted_returns(&scaled, gamma)) {
        t.discounted_return = r;
    }
}

/// Per-agent-token advantages: every token of turn `t` carries `returns[t]`.
pub fn broadcast_to_tokens(returns: &[f64], turn_spans: &[(usize, usize)]) -> Result<Vec<f64>, RewardError> {
    if returns.len() != turn_spans.len() {
        return Err(RewardError::SpanMismatch { returns: returns.len(), spans: turn_spans.len() });
    }
    let mut out = Vec::new();
    for (&r, &(s, e)) in returns.iter().zip(turn_spans) {
        out.extend(core::iter::repeat_n(r, e.saturating_sub(s)));
    }
    Ok(out)
}

/// Runs the full pipeline over a batch of rollout groups. Returns one trace
/// per trajectory (flattened in group order) and the IG scale factor.
pub fn compute_batch_rewards(
    groups: &[Vec<RewardInput>],
    cfg: &RewardConfig,
) -> Result<(Vec<RewardTrace>, Option<f64>), RewardError> {
    let mut traces = Vec::new();
    for group in groups {
        let start = traces.len();
        for input in group {
            traces.push(trajectory_rewards(input, cfg)?);
        }
        normalize_group(&mut traces[start..], cfg);
    }
    let s = ig_scale(&mut traces, cfg)?;
    for tr in traces.iter_mut() {
        fill_returns(tr, cfg.gamma);
    }
    Ok((traces, s))
}
