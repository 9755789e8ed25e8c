//! Deterministic synthetic web: a small corpus with a lexical search tool, a
//! page reader, multi-hop tasks and the episode stepper.

mod corpus;
mod episode;
mod task;
mod world;

pub use corpus::{browse, build_index, search, Corpus, Document, SearchIndex, BROWSE_TRUNCATION, SEARCH_TOP_K};
pub use episode::{EnvState, StepOutcome, FORMAT_ERROR};
pub use task::{expert_actions, generate_task, Task};
pub use world::{
    doc_id, world_vocabulary, World, ANSWER_WORDS, DOC_CAPACITY, GOALS, MARKERS, NOT_FOUND, PAGE_CLOSE, PAGE_OPEN,
    QUERY_END, RESULTS_CLOSE, RESULTS_OPEN, SEE, TOPIC_WORDS,
};

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("document `{0}` has an empty body")]
    EmptyBody(String),
    #[error("invalid task configuration: {0}")]
    InvalidConfig(String),
    #[error("episode already terminated")]
    SteppedAfterTerminal,
}
