//! Multi-turn agent trajectories and their token-level serialization.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::grammar;
use crate::vocab::Vocabulary;

/// Default interaction budget per query.
pub const DEFAULT_STEP_BUDGET: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrajError {
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("trajectory has no turns")]
    Empty,
    #[error("trajectory has {turns} turns, budget is {budget}")]
    OverBudget { turns: usize, budget: usize },
    #[error("turn {position} has index {found}, expected {expected}")]
    BadIndex { position: usize, found: usize, expected: usize },
    #[error("turn {0}: {1}")]
    Invalid(usize, &'static str),
    #[error("ground truth needs at least one answer token")]
    EmptyGroundTruth,
}

/// What a turn asks the environment to do.
///
/// `Search`, `Browse` and `Answer` are the runtime action set. `Tool` holds a
/// call to any other tool found in source data and only lives until
/// disallowed-tool pruning. `Malformed` holds sampled text that failed the
/// turn grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "args", rename_all = "snake_case")]
pub enum Action {
    Search { queries: Vec<String> },
    Browse { urls: Vec<String>, goal: String },
    Answer { text: String },
    Tool { name: String, arguments: String },
    Malformed { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Search,
    Browse,
    Answer,
    Tool,
    Malformed,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Search { .. } => ActionKind::Search,
            Action::Browse { .. } => ActionKind::Browse,
            Action::Answer { .. } => ActionKind::Answer,
            Action::Tool { .. } => ActionKind::Tool,
            Action::Malformed { .. } => ActionKind::Malformed,
        }
    }

    /// Name of the tool this action calls, `None` for answers and malformed text.
    pub fn tool_name(&self) -> Option<&str> {
        match self {
            Action::Search { .. } => Some("search"),
            Action::Browse { .. } => Some("browse"),
            Action::Tool { name, .. } => Some(name),
            Action::Answer { .. } | Action::Malformed { .. } => None,
        }
    }

    /// Checks the per-variant argument invariants.
    pub fn is_well_formed(&self) -> bool {
        match self {
            Action::Search { queries } => {
                !queries.is_empty() && queries.iter().all(|q| !q.trim().is_empty())
            }
            Action::Browse { urls, .. } => {
                !urls.is_empty() && urls.iter().all(|u| !u.trim().is_empty())
            }
            Action::Answer { text } => !text.trim().is_empty(),
            Action::Tool { name, .. } => !name.trim().is_empty(),
            Action::Malformed { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based position in the trajectory. Not serialized; recomputed on load.
    #[serde(skip)]
    pub index: usize,
    #[serde(default)]
    pub reasoning: String,
    pub action: Action,
    pub observation: Option<String>,
    #[serde(default = "default_true")]
    pub format_valid: bool,
}

fn default_true() -> bool {
    true
}

impl Turn {
    pub fn new(index: usize, action: Action, observation: Option<String>) -> Self {
        let format_valid = !matches!(action, Action::Malformed { .. });
        Turn { index, reasoning: String::new(), action, observation, format_valid }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    StepBudget,
    FormatFailure,
}

/// Ground-truth answer tokens and their rendering as an answer turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answer_tokens: Vec<String>,
    pub rendered: String,
}

impl GroundTruth {
    pub fn new(answer_tokens: Vec<String>) -> Result<Self, TrajError> {
        if answer_tokens.is_empty() || answer_tokens.iter().any(|t| t.trim().is_empty()) {
            return Err(TrajError::EmptyGroundTruth);
        }
        let rendered = grammar::render_action(&Action::Answer { text: answer_tokens.join(" ") });
        Ok(GroundTruth { answer_tokens, rendered })
    }

    /// Splits `text` on whitespace.
    pub fn from_text(text: &str) -> Result<Self, TrajError> {
        Self::new(text.split_whitespace().map(ToString::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.answer_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answer_tokens.is_empty()
    }

    /// Template tokens that precede the scored answer tokens.
    pub fn template_prefix() -> [&'static str; 1] {
        [grammar::ANSWER]
    }

    /// Answer tokens as they appear inside the rendered template.
    pub fn scored_tokens(&self) -> Vec<String> {
        self.answer_tokens.iter().map(|t| grammar::tagged(grammar::TAG_WORD, t)).collect()
    }

    /// Whether the stored rendering matches the template.
    pub fn is_consistent(&self) -> bool {
        !self.answer_tokens.is_empty()
            && self.rendered
                == grammar::render_action(&Action::Answer { text: self.answer_tokens.join(" ") })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub turns: Vec<Turn>,
    pub terminated_by: Termination,
    pub ground_truth: Option<GroundTruth>,
}

impl Trajectory {
    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// Rewrites turn indices to `1..=T`.
    pub fn reindex(&mut self) {
        for (i, turn) in self.turns.iter_mut().enumerate() {
            turn.index = i + 1;
        }
    }

    /// Text of the final answer, if the episode ended with one.
    pub fn final_answer(&self) -> Option<&str> {
        match (self.terminated_by, self.turns.last().map(|t| &t.action)) {
            (Termination::Answer, Some(Action::Answer { text })) => Some(text),
            _ => None,
        }
    }

    pub fn kinds(&self) -> Vec<ActionKind> {
        self.turns.iter().map(|t| t.action.kind()).collect()
    }

    pub fn count_kind(&self, kind: ActionKind) -> usize {
        self.turns.iter().filter(|t| t.action.kind() == kind).count()
    }

    /// Checks the structural invariants against a step budget.
    pub fn validate(&self, budget: usize) -> Result<(), TrajError> {
        let n = self.turns.len();
        if n == 0 {
            return Err(TrajError::Empty);
        }
        if n > budget {
            return Err(TrajError::OverBudget { turns: n, budget });
        }
        for (pos, turn) in self.turns.iter().enumerate() {
            if turn.index != pos + 1 {
                return Err(TrajError::BadIndex { position: pos, found: turn.index, expected: pos + 1 });
            }
            if !turn.action.is_well_formed() {
                return Err(TrajError::Invalid(pos + 1, "action arguments violate invariants"));
            }
            let is_answer = turn.action.kind() == ActionKind::Answer;
            if is_answer && pos + 1 != n {
                return Err(TrajError::Invalid(pos + 1, "answer before the final turn"));
            }
            let truncated_here = pos + 1 == n && self.terminated_by != Termination::Answer;
            let expect_obs = !is_answer && !truncated_here;
            if turn.observation.is_some() != expect_obs {
                return Err(TrajError::Invalid(pos + 1, "observation presence mismatch"));
            }
        }
        if self.terminated_by == Termination::Answer
            && self.turns[n - 1].action.kind() != ActionKind::Answer
        {
            return Err(TrajError::Invalid(n, "terminated by answer without an answer turn"));
        }
        if let Some(gt) = &self.ground_truth {
            if !gt.is_consistent() {
                return Err(TrajError::EmptyGroundTruth);
            }
        }
        Ok(())
    }
}

/// Flat token view of a trajectory with the agent-token mask.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenizedView {
    pub tokens: Vec<u32>,
    /// `true` on reasoning and action tokens.
    pub role_mask: Vec<bool>,
    /// Half-open `(start, end)` ranges of agent tokens, one per turn.
    pub turn_spans: Vec<(usize, usize)>,
}

impl TokenizedView {
    pub fn agent_token_count(&self) -> usize {
        self.role_mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Agent-emitted tokens of a turn: reasoning followed by the rendered action.
pub fn turn_agent_tokens(turn: &Turn) -> Vec<String> {
    let mut out: Vec<String> = turn.reasoning.split_whitespace().map(ToString::to_string).collect();
    out.extend(grammar::action_tokens(&turn.action));
    out
}

fn push_words(
    vocab: &Vocabulary,
    text: &str,
    tokens: &mut Vec<u32>,
    mask: &mut Vec<bool>,
    agent: bool,
) -> Result<(), TrajError> {
    for word in text.split_whitespace() {
        tokens.push(vocab.id(word).ok_or_else(|| TrajError::UnknownToken(word.to_string()))?);
        mask.push(agent);
    }
    Ok(())
}

/// Serializes a trajectory as query, then per turn reasoning, action,
/// observation.
pub fn serialize(trajectory: &Trajectory, vocab: &Vocabulary) -> Result<TokenizedView, TrajError> {
    if trajectory.turns.is_empty() {
        return Err(TrajError::Empty);
    }
    let mut tokens = Vec::new();
    let mut role_mask = Vec::new();
    let mut turn_spans = Vec::with_capacity(trajectory.turns.len());
    push_words(vocab, &trajectory.query, &mut tokens, &mut role_mask, false)?;
    for turn in &trajectory.turns {
        let start = tokens.len();
        for word in turn_agent_tokens(turn) {
            tokens.push(vocab.id(&word).ok_or(TrajError::UnknownToken(word))?);
            role_mask.push(true);
        }
        turn_spans.push((start, tokens.len()));
        if let Some(obs) = &turn.observation {
            push_words(vocab, obs, &mut tokens, &mut role_mask, false)?;
        }
    }
    Ok(TokenizedView { tokens, role_mask, turn_spans })
}

/// Upper bounds (inclusive) of the short and mid turn-count buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnBuckets {
    pub short_max: usize,
    pub mid_max: usize,
}

impl Default for TurnBuckets {
    fn default() -> Self {
        TurnBuckets { short_max: 50, mid_max: 100 }
    }
}

impl TurnBuckets {
    /// 0 = short, 1 = mid, 2 = long. Bounds belong to the lower bucket.
    pub fn bucket(&self, turns: usize) -> usize {
        if turns <= self.short_max {
            0
        } else if turns <= self.mid_max {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnHistogram {
    pub counts: [usize; 3],
    /// Fractions of the dataset per bucket; all zero for an empty dataset.
    pub shares: [f64; 3],
}

impl TurnHistogram {
    pub fn from_counts(counts: [usize; 3]) -> Self {
        let total: usize = counts.iter().sum();
        let mut shares = [0.0; 3];
        if total > 0 {
            for (s, &c) in shares.iter_mut().zip(counts.iter()) {
                *s = c as f64 / total as f64;
            }
        }
        TurnHistogram { counts, shares }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Share of trajectories above the short bucket.
    pub fn share_above_short(&self) -> f64 {
        self.shares[1] + self.shares[2]
    }
}

pub fn turn_stats_with(dataset: &[Trajectory], buckets: TurnBuckets) -> TurnHistogram {
    let mut counts = [0usize; 3];
    for t in dataset {
        counts[buckets.bucket(t.num_turns())] += 1;
    }
    TurnHistogram::from_counts(counts)
}

/// Turn-count histogram over (0, 50], (50, 100], (100, inf).
pub fn turn_stats(dataset: &[Trajectory]) -> TurnHistogram {
    turn_stats_with(dataset, TurnBuckets::default())
}
