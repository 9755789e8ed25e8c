use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::corpus::{browse, search};
use super::task::Task;
use super::world::World;
use super::EnvError;
use crate::grammar::validate_turn_format;
use crate::traj::{Action, Termination, Trajectory, Turn};

/// Observation returned for a turn that does not parse.
pub const FORMAT_ERROR: &str = "FORMAT_ERROR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Observation(String),
    Terminal(Termination),
}

/// One episode in progress. The world and task are borrowed and immutable.
#[derive(Debug, Clone)]
pub struct EnvState<'w> {
    world: &'w World,
    pub task: &'w Task,
    pub history: Trajectory,
    pub steps_used: usize,
    pub budget: usize,
    finished: bool,
}

impl<'w> EnvState<'w> {
    pub fn new(world: &'w World, task: &'w Task, budget: usize) -> Self {
        EnvState {
            world,
            task,
            history: Trajectory {
                query: task.query.clone(),
                turns: Vec::new(),
                terminated_by: Termination::StepBudget,
                ground_truth: Some(task.ground_truth()),
            },
            steps_used: 0,
            budget,
            finished: false,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Applies one turn. The turn's index and observation are overwritten.
    pub fn step(&mut self, mut turn: Turn) -> Result<StepOutcome, EnvError> {
        if self.finished || self.steps_used >= self.budget {
            return Err(EnvError::SteppedAfterTerminal);
        }
        self.steps_used += 1;
        turn.index = self.history.turns.len() + 1;

        let observation = if !turn.format_valid {
            FORMAT_ERROR.to_string()
        } else {
            match &turn.action {
                Action::Answer { .. } => {
                    turn.observation = None;
                    self.history.turns.push(turn);
                    self.history.terminated_by = Termination::Answer;
                    self.finished = true;
                    return Ok(StepOutcome::Terminal(Termination::Answer));
                }
                Action::Search { queries } => search(&self.world.index, &self.world.corpus, queries),
                Action::Browse { urls, goal } => browse(&self.world.corpus, urls, goal),
                Action::Tool { .. } | Action::Malformed { .. } => FORMAT_ERROR.to_string(),
            }
        };

        if self.steps_used == self.budget {
            turn.observation = None;
            self.history.turns.push(turn);
            self.history.terminated_by = Termination::StepBudget;
            self.finished = true;
            return Ok(StepOutcome::Terminal(Termination::StepBudget));
        }
        turn.observation = Some(observation.clone());
        self.history.turns.push(turn);
        Ok(StepOutcome::Observation(observation))
    }

    pub fn step_action(&mut self, reasoning: String, action: Action) -> Result<StepOutcome, EnvError> {
        let mut turn = Turn::new(0, action, None);
        turn.reasoning = reasoning;
        self.step(turn)
    }

    /// Parses `text` with the turn grammar and applies it; unparseable text
    /// becomes a malformed turn.
    pub fn step_text(&mut self, text: &str) -> Result<StepOutcome, EnvError> {
        let turn = match validate_turn_format(text) {
            (true, Some(action)) => Turn::new(0, action, None),
            _ => Turn::new(0, Action::Malformed { text: text.to_string() }, None),
        };
        self.step(turn)
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{expert_actions, generate_task};

    fn world() -> (World, Task) {
        let (c, t) = generate_task(3, 2, 10).unwrap();
        (World::new(c).unwrap(), t)
    }

    #[test]
    fn answer_terminates_without_observation() {
        let (w, t) = world();
        let mut env = EnvState::new(&w, &t, 200);
        let out = env.step_text("ANSWER w:paris END").unwrap();
        assert_eq!(out, StepOutcome::Terminal(Termination::Answer));
        assert!(env.history.turns[0].observation.is_none());
        assert_eq!(env.step_text("ANSWER w:paris END"), Err(EnvError::SteppedAfterTerminal));
    }

    #[test]
    fn budget_exhaustion_at_200() {
        let (w, t) = world();
        let mut env = EnvState::new(&w, &t, 200);
        for i in 1..200 {
            let out = env.step_text("SEARCH q:amber END").unwrap();
            assert!(matches!(out, StepOutcome::Observation(_)), "step {i}");
        }
        let out = env.step_text("SEARCH q:amber END").unwrap();
        assert_eq!(out, StepOutcome::Terminal(Termination::StepBudget));
        let traj = env.into_trajectory();
        assert_eq!(traj.num_turns(), 200);
        assert!(traj.turns[199].observation.is_none());
        assert!(traj.validate(200).is_ok());
    }

    #[test]
    fn invalid_text_costs_a_step() {
        let (w, t) = world();
        let mut env = EnvState::new(&w, &t, 200);
        let out = env.step_text("BROWSE END").unwrap();
        assert_eq!(out, StepOutcome::Observation(FORMAT_ERROR.into()));
        assert_eq!(env.steps_used, 1);
        assert!(!env.history.turns[0].format_valid);
        assert!(!env.is_finished());
    }

    #[test]
    fn replay_reproduces_observations() {
        let (w, t) = world();
        let mut env = EnvState::new(&w, &t, 200);
        for a in expert_actions(&t) {
            env.step_action(String::new(), a).unwrap();
        }
        let first = env.into_trajectory();
        assert!(first.validate(200).is_ok());
        let mut again = EnvState::new(&w, &t, 200);
        for turn in &first.turns {
            again.step_action(String::new(), turn.action.clone()).unwrap();
        }
        assert_eq!(again.into_trajectory(), first);
        assert_eq!(first.turns.len(), 4);
    }
}
