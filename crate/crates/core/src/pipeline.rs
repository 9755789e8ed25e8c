//! SFT data construction: schema alignment, disallowed-tool pruning,
//! duplicate removal, correctness filtering and turn-aware resampling.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::traj::{turn_stats_with, Action, ActionKind, GroundTruth, Termination, Trajectory, Turn, TurnBuckets};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("message {position}: {reason}")]
    Unpairable { position: usize, reason: &'static str },
    #[error("record has no user query")]
    NoQuery,
    #[error("record has no agent turns")]
    NoTurns,
    #[error("invalid ground truth")]
    BadGroundTruth,
    #[error("unreadable record: {0}")]
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error("no turns remain after pruning disallowed tools")]
    EmptyAfterPrune,
    #[error("resample weights must all be at least 1")]
    InvalidWeights,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("judge unavailable: {0}")]
pub struct JudgeUnavailable(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// A trajectory in the source chat format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

const SEARCH_NAMES: [&str; 3] = ["search", "web_search", "google_search"];
const BROWSE_NAMES: [&str; 4] = ["browse", "visit", "open_url", "fetch_page"];

/// Maps a source tool call onto the runtime action set.
pub fn normalize_tool_call(call: &ToolCall) -> Action {
    let name = call.name.trim().to_lowercase();
    if SEARCH_NAMES.contains(&name.as_str()) {
        Action::Search { queries: call.arguments.clone() }
    } else if BROWSE_NAMES.contains(&name.as_str()) {
        Action::Browse { urls: call.arguments.clone(), goal: call.goal.clone().unwrap_or_default() }
    } else {
        Action::Tool { name, arguments: call.arguments.join(" ") }
    }
}

/// Converts a source record into a [`Trajectory`]. Each assistant tool call
/// must be followed by exactly one tool response, except a final call cut off
/// by the step budget.
pub fn align_schema(record: &RawRecord) -> Result<Trajectory, SchemaError> {
    let mut query = None;
    let mut turns: Vec<Turn> = Vec::new();
    let mut pending = false;
    let mut answered = false;
    for (pos, msg) in record.messages.iter().enumerate() {
        let err = |reason| Err(SchemaError::Unpairable { position: pos, reason });
        if answered {
            return err("message after the final answer");
        }
        match msg.role {
            Role::System => {}
            Role::User => {
                if query.is_some() || !turns.is_empty() {
                    return err("unexpected user message");
                }
                query = Some(msg.content.trim().to_string());
            }
            Role::Assistant => {
                if query.is_none() {
                    return Err(SchemaError::NoQuery);
                }
                if pending {
                    return err("tool call without a response");
                }
                let action = match (&msg.tool_call, &msg.answer) {
                    (Some(call), None) => {
                        pending = true;
                        normalize_tool_call(call)
                    }
                    (None, Some(answer)) => {
                        answered = true;
                        Action::Answer { text: answer.clone() }
                    }
                    _ => return err("assistant message needs exactly one of tool_call or answer"),
                };
                let mut turn = Turn::new(turns.len() + 1, action, None);
                turn.reasoning = msg.content.clone();
                turns.push(turn);
            }
            Role::Tool => {
                if !pending {
                    return err("tool response without a preceding call");
                }
                pending = false;
                turns.last_mut().expect("pending implies a turn").observation = Some(msg.content.clone());
            }
        }
    }
    let query = query.ok_or(SchemaError::NoQuery)?;
    if turns.is_empty() {
        return Err(SchemaError::NoTurns);
    }
    let ground_truth = match &record.ground_truth {
        Some(text) => Some(GroundTruth::from_text(text).map_err(|_| SchemaError::BadGroundTruth)?),
        None => None,
    };
    Ok(Trajectory {
        query,
        turns,
        terminated_by: if answered { Termination::Answer } else { Termination::StepBudget },
        ground_truth,
    })
}

/// Drops turns whose tool is not in `allowed`, together with their responses.
pub fn prune_disallowed(trajectory: &Trajectory, allowed: &[String]) -> Result<(Trajectory, usize), PipelineError> {
    let mut out = trajectory.clone();
    let before = out.turns.len();
    out.turns.retain(|t| match t.action.tool_name() {
        Some(name) => allowed.iter().any(|a| a == name),
        None => true,
    });
    let removed = before - out.turns.len();
    if out.turns.is_empty() {
        return Err(PipelineError::EmptyAfterPrune);
    }
    out.reindex();
    Ok((out, removed))
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// Duplicate key of a tool turn: the kind plus the sorted normalized
/// arguments. Browse goals are ignored.
pub fn dedupe_key(action: &Action) -> Option<(ActionKind, Vec<String>)> {
    let args = match action {
        Action::Search { queries } => queries,
        Action::Browse { urls, .. } => urls,
        _ => return None,
    };
    let mut key: Vec<String> = args.iter().map(|a| normalize_text(a)).collect();
    key.sort();
    Some((action.kind(), key))
}

/// Removes search and browse turns that repeat an earlier surviving call.
pub fn dedupe_tool_calls(trajectory: &Trajectory) -> (Trajectory, usize) {
    let mut seen = BTreeSet::new();
    let mut out = trajectory.clone();
    let before = out.turns.len();
    out.turns.retain(|t| match dedupe_key(&t.action) {
        Some(key) => seen.insert(key),
        None => true,
    });
    let removed = before - out.turns.len();
    out.reindex();
    (out, removed)
}

pub trait Judge {
    fn judge(&self, answer: &str, ground_truth: &str) -> Result<bool, JudgeUnavailable>;
}

/// Lowercases, strips punctuation and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(|c| c.to_lowercase())
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strict equality of normalized answers.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn judge(&self, answer: &str, ground_truth: &str) -> Result<bool, JudgeUnavailable> {
        Ok(normalize_answer(answer) == normalize_answer(ground_truth))
    }
}

/// `false` unless the trajectory ended with an answer and carries a ground truth.
pub fn judge_correctness(trajectory: &Trajectory, judge: &dyn Judge) -> Result<bool, JudgeUnavailable> {
    match (trajectory.final_answer(), &trajectory.ground_truth) {
        (Some(answer), Some(gt)) => judge.judge(answer, &gt.answer_tokens.join(" ")),
        _ => Ok(false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleWeights {
    pub weight_short: u32,
    pub weight_mid: u32,
    pub weight_long: u32,
}

impl Default for ResampleWeights {
    fn default() -> Self {
        ResampleWeights { weight_short: 1, weight_mid: 2, weight_long: 5 }
    }
}

impl ResampleWeights {
    pub fn new(weight_short: u32, weight_mid: u32, weight_long: u32) -> Result<Self, PipelineError> {
        if weight_short == 0 || weight_mid == 0 || weight_long == 0 {
            return Err(PipelineError::InvalidWeights);
        }
        Ok(ResampleWeights { weight_short, weight_mid, weight_long })
    }

    pub fn for_bucket(&self, bucket: usize) -> u32 {
        match bucket {
            0 => self.weight_short,
            1 => self.weight_mid,
            _ => self.weight_long,
        }
    }
}

/// Source index of every output instance, in output order.
pub fn resample_indices(turn_counts: &[usize], weights: ResampleWeights, buckets: TurnBuckets) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &t) in turn_counts.iter().enumerate() {
        let w = weights.for_bucket(buckets.bucket(t)) as usize;
        out.extend(core::iter::repeat_n(i, w));
    }
    out
}

/// Repeats each trajectory `weight(bucket(T))` times, contiguously and in
/// input order.
pub fn resample_by_turns(dataset: &[Trajectory], weights: ResampleWeights, buckets: TurnBuckets) -> Vec<Trajectory> {
    let counts: Vec<usize> = dataset.iter().map(Trajectory::num_turns).collect();
    resample_indices(&counts, weights, buckets).into_iter().map(|i| dataset[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub allowed_tools: Vec<String>,
    pub weights: ResampleWeights,
    pub buckets: TurnBuckets,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            allowed_tools: alloc::vec!["search".to_string(), "browse".to_string()],
            weights: ResampleWeights::default(),
            buckets: TurnBuckets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_count: usize,
    pub converted_count: usize,
    pub trajectories_with_disallowed: usize,
    pub disallowed_calls_removed: usize,
    pub trajectories_with_duplicates: usize,
    pub duplicate_calls_removed: usize,
    pub valid_after_cleaning: usize,
    pub retained_after_judge: usize,
    pub retained_fraction: f64,
    pub resampled_total: usize,
    pub bucket_shares_before: [f64; 3],
    pub bucket_shares_after: [f64; 3],
}

impl CleanReport {
    /// The ordering and ratio invariants of the report.
    pub fn is_consistent(&self) -> bool {
        let frac = if self.valid_after_cleaning == 0 {
            0.0
        } else {
            self.retained_after_judge as f64 / self.valid_after_cleaning as f64
        };
        self.retained_after_judge <= self.valid_after_cleaning
            && self.valid_after_cleaning <= self.converted_count
            && self.converted_count <= self.input_count
            && self.trajectories_with_disallowed <= self.disallowed_calls_removed
            && self.trajectories_with_duplicates <= self.duplicate_calls_removed
            && self.retained_fraction == frac
    }
}

/// Result of the structural cleaning of one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Cleaned {
    SchemaFailed(SchemaError),
    Dropped { disallowed: usize, duplicates: usize, reason: String },
    Valid { trajectory: Trajectory, disallowed: usize, duplicates: usize },
}

/// Align, prune and dedupe one record. Pure, so callers may run it in parallel.
pub fn clean_record(record: &RawRecord, allowed: &[String]) -> Cleaned {
    let aligned = match align_schema(record) {
        Ok(t) => t,
        Err(e) => return Cleaned::SchemaFailed(e),
    };
    let (pruned, disallowed) = match prune_disallowed(&aligned, allowed) {
        Ok(x) => x,
        Err(e) => {
            let disallowed = aligned.turns.len();
            return Cleaned::Dropped { disallowed, duplicates: 0, reason: e.to_string() };
        }
    };
    let (deduped, duplicates) = dedupe_tool_calls(&pruned);
    match deduped.validate(usize::MAX) {
        Ok(()) => Cleaned::Valid { trajectory: deduped, disallowed, duplicates },
        Err(e) => Cleaned::Dropped { disallowed, duplicates, reason: e.to_string() },
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    /// Resampled training set.
    pub trajectories: Vec<Trajectory>,
    /// Judged-correct trajectories before resampling.
    pub retained: Vec<Trajectory>,
    /// Trajectories the judge could not rule on. Kept aside, not counted as retained.
    pub held_out: Vec<Trajectory>,
    /// `(record position, message)` for every record dropped along the way.
    pub errors: Vec<(usize, String)>,
    pub report: CleanReport,
}

/// Folds per-record cleaning results, judges, and resamples.
pub fn finish_pipeline(cleaned: Vec<Cleaned>, judge: &dyn Judge, cfg: &PipelineConfig) -> PipelineOutput {
    let mut out = PipelineOutput::default();
    let r = &mut out.report;
    r.input_count = cleaned.len();
    for (pos, c) in cleaned.into_iter().enumerate() {
        match c {
            Cleaned::SchemaFailed(e) => out.errors.push((pos, e.to_string())),
            Cleaned::Dropped { disallowed, duplicates, reason } => {
                r.converted_count += 1;
                r.disallowed_calls_removed += disallowed;
                r.trajectories_with_disallowed += usize::from(disallowed > 0);
                r.duplicate_calls_removed += duplicates;
                r.trajectories_with_duplicates += usize::from(duplicates > 0);
                out.errors.push((pos, reason));
            }
            Cleaned::Valid { trajectory, disallowed, duplicates } => {
                r.converted_count += 1;
                r.disallowed_calls_removed += disallowed;
                r.trajectories_with_disallowed += usize::from(disallowed > 0);
                r.duplicate_calls_removed += duplicates;
                r.trajectories_with_duplicates += usize::from(duplicates > 0);
                r.valid_after_cleaning += 1;
                match judge_correctness(&trajectory, judge) {
                    Ok(true) => out.retained.push(trajectory),
                    Ok(false) => {}
                    Err(e) => {
                        out.errors.push((pos, e.to_string()));
                        out.held_out.push(trajectory);
                    }
                }
            }
        }
    }
    r.retained_after_judge = out.retained.len();
    r.retained_fraction =
        if r.valid_after_cleaning == 0 { 0.0 } else { r.retained_after_judge as f64 / r.valid_after_cleaning as f64 };
    out.trajectories = resample_by_turns(&out.retained, cfg.weights, cfg.buckets);
    r.resampled_total = out.trajectories.len();
    r.bucket_shares_before = turn_stats_with(&out.retained, cfg.buckets).shares;
    r.bucket_shares_after = turn_stats_with(&out.trajectories, cfg.buckets).shares;
    out
}

/// align → prune → dedupe → judge → resample, sequentially.
pub fn run_pipeline(records: &[RawRecord], judge: &dyn Judge, cfg: &PipelineConfig) -> PipelineOutput {
    let cleaned = records.iter().map(|r| clean_record(r, &cfg.allowed_tools)).collect();
    finish_pipeline(cleaned, judge, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn user(q: &str) -> Message {
        Message { role: Role::User, content: q.to_string(), tool_call: None, answer: None }
    }
    fn call(name: &str, args: &[&str], goal: Option<&str>) -> Message {
        Message {
            role: Role::Assistant,
            content: "think".to_string(),
            tool_call: Some(ToolCall {
                name: name.to_string(),
                arguments: args.iter().map(|s| s.to_string()).collect(),
                goal: goal.map(|g| g.to_string()),
            }),
            answer: None,
        }
    }
    fn tool(obs: &str) -> Message {
        Message { role: Role::Tool, content: obs.to_string(), tool_call: None, answer: None }
    }
    fn answer(a: &str) -> Message {
        Message { role: Role::Assistant, content: String::new(), tool_call: None, answer: Some(a.to_string()) }
    }
    fn rec(messages: Vec<Message>, gt: &str) -> RawRecord {
        RawRecord { id: None, messages, ground_truth: Some(gt.to_string()) }
    }

    #[test]
    fn align_examples() {
        let t = align_schema(&rec(vec![user("q"), call("search", &["a"], None), tool("r")], "x")).unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.turns[0].observation.as_deref(), Some("r"));
        assert_eq!(t.terminated_by, Termination::StepBudget);

        let t = align_schema(&rec(vec![user("q"), call("visit", &["u1"], Some("g")), tool("p"), answer("paris")], "x"))
            .unwrap();
        assert_eq!(t.terminated_by, Termination::Answer);
        assert_eq!(t.turns[0].action, Action::Browse { urls: vec!["u1".into()], goal: "g".into() });
        t.validate(200).unwrap();

        let e = align_schema(&rec(vec![user("q"), tool("orphan")], "x")).unwrap_err();
        assert_eq!(e, SchemaError::Unpairable { position: 1, reason: "tool response without a preceding call" });
        assert!(align_schema(&rec(vec![user("q"), call("search", &["a"], None), answer("x")], "x")).is_err());
    }

    fn kinds_traj(kinds: &[&str]) -> Trajectory {
        let mut msgs = vec![user("q")];
        for k in kinds {
            if *k == "answer" {
                msgs.push(answer("paris"));
            } else {
                msgs.push(call(k, &["a"], None));
                msgs.push(tool("obs"));
            }
        }
        align_schema(&rec(msgs, "paris")).unwrap()
    }

    #[test]
    fn prune_examples() {
        let allowed = PipelineConfig::default().allowed_tools;
        let t = kinds_traj(&["search", "python_interpreter", "browse", "answer"]);
        let (p, n) = prune_disallowed(&t, &allowed).unwrap();
        assert_eq!(n, 1);
        assert_eq!(p.kinds(), vec![ActionKind::Search, ActionKind::Browse, ActionKind::Answer]);
        assert_eq!(p.turns.iter().map(|t| t.index).collect::<Vec<_>>(), vec![1, 2, 3]);
        let t = kinds_traj(&["search", "browse", "answer"]);
        assert_eq!(prune_disallowed(&t, &allowed).unwrap(), (t.clone(), 0));
        let t = kinds_traj(&["python", "calculator"]);
        assert_eq!(prune_disallowed(&t, &allowed), Err(PipelineError::EmptyAfterPrune));
    }

    #[test]
    fn dedupe_examples() {
        let t = align_schema(&rec(
            vec![user("q"), call("search", &["a"], None), tool("r"), call("search", &["A "], None), tool("r"), answer("x")],
            "x",
        ))
        .unwrap();
        let (d, n) = dedupe_tool_calls(&t);
        assert_eq!(n, 1);
        assert_eq!(d.kinds(), vec![ActionKind::Search, ActionKind::Answer]);

        let t = align_schema(&rec(
            vec![user("q"), call("browse", &["u1"], Some("x")), tool("p"), call("browse", &["u1"], Some("y")), tool("p")],
            "x",
        ))
        .unwrap();
        assert_eq!(dedupe_tool_calls(&t).1, 1);

        let t = kinds_traj(&["search", "browse", "answer"]);
        assert_eq!(dedupe_tool_calls(&t), (t.clone(), 0));
    }

    #[test]
    fn rule_judge_examples() {
        assert!(RuleJudge.judge("Paris", "paris").unwrap());
        assert!(!RuleJudge.judge("Paris, France", "paris").unwrap());
        assert!(RuleJudge.judge("  New   York! ", "new york").unwrap());
        let t = kinds_traj(&["search"]);
        assert!(!judge_correctness(&t, &RuleJudge).unwrap());
        let t = kinds_traj(&["search", "answer"]);
        assert!(judge_correctness(&t, &RuleJudge).unwrap());
    }

    #[test]
    fn resample_examples() {
        let counts = [10, 60, 120, 50, 100, 101];
        let idx = resample_indices(&counts, ResampleWeights::default(), TurnBuckets::default());
        assert_eq!(idx, vec![0, 1, 1, 2, 2, 2, 2, 2, 3, 4, 4, 5, 5, 5, 5, 5]);
        let ones = ResampleWeights::new(1, 1, 1).unwrap();
        assert_eq!(resample_indices(&counts, ones, TurnBuckets::default()), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ResampleWeights::new(0, 1, 1), Err(PipelineError::InvalidWeights));
    }

    struct Flaky;
    impl Judge for Flaky {
        fn judge(&self, answer: &str, _: &str) -> Result<bool, JudgeUnavailable> {
            if answer == "oslo" {
                Err(JudgeUnavailable("timeout".into()))
            } else {
                Ok(answer == "paris")
            }
        }
    }

    #[test]
    fn pipeline_bookkeeping() {
        let good = rec(vec![user("q"), call("search", &["a"], None), tool("r"), answer("paris")], "paris");
        let wrong = rec(vec![user("q"), answer("lima")], "paris");
        let broken = rec(vec![user("q"), tool("r")], "paris");
        let out = run_pipeline(&[good.clone(), wrong, broken, good], &RuleJudge, &PipelineConfig::default());
        assert_eq!(out.report.valid_after_cleaning, 3);
        assert_eq!(out.report.retained_after_judge, 2);
        assert_eq!(out.report.converted_count, 3);
        assert!(out.report.is_consistent());

        let empty = run_pipeline(&[], &RuleJudge, &PipelineConfig::default());
        assert_eq!(empty.report, CleanReport::default());

        let held = rec(vec![user("q"), answer("oslo")], "oslo");
        let out = run_pipeline(&[held], &Flaky, &PipelineConfig::default());
        assert_eq!(out.held_out.len(), 1);
        assert_eq!(out.report.retained_after_judge, 0);
    }
}
