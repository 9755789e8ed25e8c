use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Document};
use super::episode::{EnvState, StepOutcome};
use super::world::{doc_id, World, ANSWER_WORDS, DOC_CAPACITY, QUERY_END, SEE, TOPIC_WORDS};
use super::EnvError;
use crate::grammar::{tagged, TAG_URL};
use crate::rng::stream_rng;
use crate::traj::{Action, GroundTruth, Termination};

const FILLER_LEN: usize = 6;
const QUERY_WORDS: usize = 2;

/// A multi-hop question: the query leads to `chain[0]`, each page links to
/// the next, and only the last page carries the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub query: String,
    pub chain: Vec<String>,
    pub answer: Vec<String>,
    pub seed: u64,
}

impl Task {
    pub fn hops(&self) -> usize {
        self.chain.len()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::new(self.answer.clone()).expect("generated tasks have an answer")
    }

    /// Query words, without the trailing marker.
    pub fn query_words(&self) -> Vec<&str> {
        self.query.split_whitespace().filter(|w| *w != QUERY_END).collect()
    }

    /// Checks the chain, answer placement and query overlap invariants.
    pub fn check(&self, corpus: &Corpus) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.chain.is_empty() || self.answer.is_empty() {
            return bad("empty chain or answer");
        }
        let mut pages = Vec::with_capacity(self.chain.len());
        for id in &self.chain {
            match corpus.get(id) {
                Some(d) => pages.push(d),
                None => return bad("chain references an unknown document"),
            }
        }
        for w in pages.windows(2) {
            let link = tagged(TAG_URL, &w[1].doc_id);
            if !w[0].body.contains(&link) {
                return bad("chain link missing");
            }
        }
        let answer = &self.answer[0];
        for d in corpus.docs() {
            let has = d.body.iter().any(|t| t == answer);
            let is_last = d.doc_id == *self.chain.last().unwrap();
            if has != is_last {
                return bad("answer token placement");
            }
        }
        if !self.query_words().iter().any(|w| pages[0].title.iter().any(|t| t == w)) {
            return bad("query does not overlap the first page title");
        }
        Ok(())
    }
}

/// The shortest solving action sequence: one search, one browse per hop,
/// then the answer.
pub fn expert_actions(task: &Task) -> Vec<Action> {
    let mut out = Vec::with_capacity(task.hops() + 2);
    let first = task.query_words().first().map(|s| s.to_string()).unwrap_or_default();
    out.push(Action::Search { queries: vec![first] });
    for id in &task.chain {
        out.push(Action::Browse { urls: vec![id.clone()], goal: "evidence".into() });
    }
    out.push(Action::Answer { text: task.answer.join(" ") });
    out
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn insert_at_random(rng: &mut ChaCha8Rng, body: &mut Vec<String>, tokens: Vec<String>) {
    let at = rng.gen_range(0..=body.len());
    for (k, t) in tokens.into_iter().enumerate() {
        body.insert(at + k, t);
    }
}

/// Generates a corpus of `corpus_size` documents and a `hops`-hop task,
/// deterministically from `seed`.
pub fn generate_task(seed: u64, hops: usize, corpus_size: usize) -> Result<(Corpus, Task), EnvError> {
    if hops == 0 {
        return Err(EnvError::InvalidConfig("hops must be at least 1".into()));
    }
    if corpus_size < 5 * hops {
        return Err(EnvError::InvalidConfig(format!("corpus_size {corpus_size} < 5 * hops ({hops})")));
    }
    if corpus_size > DOC_CAPACITY {
        return Err(EnvError::InvalidConfig(format!("corpus_size {corpus_size} exceeds {DOC_CAPACITY}")));
    }
    let mut rng = stream_rng(seed, "task");

    let mut positions: Vec<usize> = (0..corpus_size).collect();
    positions.shuffle(&mut rng);
    let chain_pos: Vec<usize> = positions[..hops].to_vec();

    let mut topics: Vec<&str> = TOPIC_WORDS.to_vec();
    topics.shuffle(&mut rng);
    let (query_words, rest) = topics.split_at(QUERY_WORDS);
    let answer = ANSWER_WORDS[rng.gen_range(0..ANSWER_WORDS.len())];
    let decoys: Vec<&str> = ANSWER_WORDS.iter().copied().filter(|w| *w != answer).collect();
    let distractors: Vec<usize> = (0..corpus_size).filter(|i| !chain_pos.contains(i)).collect();

    let mut docs = Vec::with_capacity(corpus_size);
    for i in 0..corpus_size {
        let hop = chain_pos.iter().position(|&p| p == i);
        let title: Vec<String> = if hop == Some(0) {
            query_words.iter().map(|s| s.to_string()).collect()
        } else {
            let a = pick(&mut rng, rest);
            let mut b = pick(&mut rng, rest);
            while b == a {
                b = pick(&mut rng, rest);
            }
            vec![a.to_string(), b.to_string()]
        };
        let snippet: Vec<String> = (0..2).map(|_| pick(&mut rng, rest).to_string()).collect();
        let mut body: Vec<String> = (0..FILLER_LEN).map(|_| pick(&mut rng, rest).to_string()).collect();
        match hop {
            Some(k) if k + 1 < hops => {
                let link = tagged(TAG_URL, &doc_id(chain_pos[k + 1]));
                insert_at_random(&mut rng, &mut body, vec![SEE.to_string(), link]);
            }
            Some(_) => insert_at_random(&mut rng, &mut body, vec![answer.to_string()]),
            None => {
                if rng.gen_bool(0.5) {
                    let others: Vec<usize> = distractors.iter().copied().filter(|&d| d != i).collect();
                    let target = others[rng.gen_range(0..others.len())];
                    insert_at_random(&mut rng, &mut body, vec![SEE.to_string(), tagged(TAG_URL, &doc_id(target))]);
                }
                if rng.gen_bool(0.5) {
                    let decoy = pick(&mut rng, &decoys).to_string();
                    insert_at_random(&mut rng, &mut body, vec![decoy]);
                }
            }
        }
        docs.push(Document { doc_id: doc_id(i), title, snippet, body });
    }

    let corpus = Corpus::new(docs)?;
    let mut query: Vec<String> = query_words.iter().map(|s| s.to_string()).collect();
    query.push(QUERY_END.to_string());
    let task = Task {
        query: query.join(" "),
        chain: chain_pos.iter().map(|&p| doc_id(p)).collect(),
        answer: vec![answer.to_string()],
        seed,
    };
    task.check(&corpus)?;
    verify_solvable(&corpus, &task)?;
    Ok((corpus, task))
}

/// Replays the expert sequence and confirms it terminates with the answer.
fn verify_solvable(corpus: &Corpus, task: &Task) -> Result<(), EnvError> {
    let world = World::new(corpus.clone())?;
    let actions = expert_actions(task);
    if actions.len() > 2 * task.hops() + 1 {
        return Err(EnvError::InvalidConfig("expert sequence too long".into()));
    }
    let mut env = EnvState::new(&world, task, actions.len());
    let mut last = None;
    for a in actions {
        last = Some(env.step_action(String::new(), a)?);
    }
    let traj = env.into_trajectory();
    match (last, traj.final_answer()) {
        (Some(StepOutcome::Terminal(Termination::Answer)), Some(ans)) if ans == task.answer.join(" ") => Ok(()),
        _ => Err(EnvError::InvalidConfig("expert failed to solve the task".into())),
    }
}
