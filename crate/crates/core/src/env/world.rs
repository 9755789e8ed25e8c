use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::corpus::{build_index, Corpus, SearchIndex};
use super::EnvError;
use crate::grammar::{self, TAG_GOAL, TAG_QUERY, TAG_URL, TAG_WORD};
use crate::vocab::Vocabulary;

/// Words used for titles, snippets, queries and page filler.
pub const TOPIC_WORDS: [&str; 32] = [
    "amber", "basil", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "iris", "juniper", "kelp",
    "lagoon", "maple", "nectar", "onyx", "prairie", "quartz", "raven", "sierra", "tundra", "umber", "violet",
    "willow", "xylem", "yarrow", "zephyr", "acorn", "birch", "cobalt", "dune", "estuary", "flint",
];

/// Words that can be answers. Pages may carry one of them.
pub const ANSWER_WORDS: [&str; 12] = [
    "paris", "oslo", "lima", "cairo", "quito", "hanoi", "dakar", "riga", "sofia", "bern", "accra", "doha",
];

pub const GOALS: [&str; 3] = ["evidence", "link", "answer"];

pub const QUERY_END: &str = "?";
pub const RESULTS_OPEN: &str = "results";
pub const RESULTS_CLOSE: &str = "/results";
pub const PAGE_OPEN: &str = "page";
pub const PAGE_CLOSE: &str = "/page";
pub const SEE: &str = "see";
pub const NOT_FOUND: &str = "NOT_FOUND";

pub const MARKERS: [&str; 8] =
    [QUERY_END, RESULTS_OPEN, RESULTS_CLOSE, PAGE_OPEN, PAGE_CLOSE, SEE, NOT_FOUND, super::FORMAT_ERROR];

/// Largest corpus the shared vocabulary can address.
pub const DOC_CAPACITY: usize = 24;

pub fn doc_id(i: usize) -> String {
    format!("d{i:02}")
}

/// The closed vocabulary covering every token the environment, the grammar
/// or a ground truth can produce.
pub fn world_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = [grammar::SEARCH, grammar::BROWSE, grammar::ANSWER, grammar::END]
        .iter()
        .chain(MARKERS.iter())
        .chain(TOPIC_WORDS.iter())
        .chain(ANSWER_WORDS.iter())
        .map(|s| s.to_string())
        .collect();
    tokens.extend(TOPIC_WORDS.iter().map(|w| grammar::tagged(TAG_QUERY, w)));
    tokens.extend(GOALS.iter().map(|w| grammar::tagged(TAG_GOAL, w)));
    tokens.extend(ANSWER_WORDS.iter().map(|w| grammar::tagged(TAG_WORD, w)));
    tokens.extend((0..DOC_CAPACITY).map(|i| grammar::tagged(TAG_URL, &doc_id(i))));
    Vocabulary::new(tokens).expect("world vocabulary has unique tokens")
}

/// An immutable corpus together with its search index.
#[derive(Debug, Clone)]
pub struct World {
    pub corpus: Corpus,
    pub index: SearchIndex,
}

impl World {
    pub fn new(corpus: Corpus) -> Result<Self, EnvError> {
        let index = build_index(&corpus)?;
        Ok(World { corpus, index })
    }
}
