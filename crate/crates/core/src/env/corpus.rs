use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::world::{NOT_FOUND, PAGE_CLOSE, PAGE_OPEN, RESULTS_CLOSE, RESULTS_OPEN};
use super::EnvError;
use crate::grammar::{tagged, TAG_URL};

/// Results returned per query.
pub const SEARCH_TOP_K: usize = 10;
/// Page bodies are cut to this many tokens.
pub const BROWSE_TRUNCATION: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: Vec<String>,
    pub snippet: Vec<String>,
    pub body: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self, EnvError> {
        let mut by_id = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            if d.body.is_empty() {
                return Err(EnvError::EmptyBody(d.doc_id.clone()));
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(EnvError::DuplicateDocId(d.doc_id.clone()));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Title-and-snippet term sets, ordered by doc id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchIndex {
    entries: Vec<(String, BTreeSet<String>)>,
}

impl SearchIndex {
    /// `|terms(query) ∩ terms(title ∪ snippet)|`, or `None` for an unknown id.
    pub fn score(&self, doc_id: &str, query: &str) -> Option<usize> {
        let pos = self.entries.binary_search_by(|(id, _)| id.as_str().cmp(doc_id)).ok()?;
        Some(overlap(&self.entries[pos].1, query))
    }

    /// Positive-score documents by descending score, ties by ascending doc id.
    pub fn top_k(&self, query: &str, k: usize) -> Vec<(&str, usize)> {
        let mut hits: Vec<(&str, usize)> = self
            .entries
            .iter()
            .map(|(id, terms)| (id.as_str(), overlap(terms, query)))
            .filter(|&(_, s)| s > 0)
            .collect();
        // Entries are already in id order, so a stable sort on score keeps the tie-break.
        hits.sort_by_key(|h| core::cmp::Reverse(h.1));
        hits.truncate(k);
        hits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn overlap(terms: &BTreeSet<String>, query: &str) -> usize {
    let q: BTreeSet<&str> = query.split_whitespace().collect();
    q.iter().filter(|t| terms.contains(**t)).count()
}

pub fn build_index(corpus: &Corpus) -> Result<SearchIndex, EnvError> {
    let mut entries: Vec<(String, BTreeSet<String>)> = corpus
        .docs
        .iter()
        .map(|d| (d.doc_id.clone(), d.title.iter().chain(d.snippet.iter()).cloned().collect()))
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(EnvError::DuplicateDocId(w[0].0.clone()));
    }
    Ok(SearchIndex { entries })
}

/// One `results ... /results` section per query, in query order. Each hit is
/// `u:<id> <title> <snippet>`.
pub fn search(index: &SearchIndex, corpus: &Corpus, queries: &[String]) -> String {
    let mut out: Vec<String> = Vec::new();
    for q in queries {
        out.push(RESULTS_OPEN.to_string());
        for (id, _) in index.top_k(q, SEARCH_TOP_K) {
            out.push(tagged(TAG_URL, id));
            if let Some(doc) = corpus.get(id) {
                out.extend(doc.title.iter().cloned());
                out.extend(doc.snippet.iter().cloned());
            }
        }
        out.push(RESULTS_CLOSE.to_string());
    }
    out.join(" ")
}

/// One `page ... /page` section per url, in argument order, carrying the first
/// [`BROWSE_TRUNCATION`] body tokens or `NOT_FOUND`. The goal does not change
/// the page content.
pub fn browse(corpus: &Corpus, urls: &[String], _goal: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for u in urls {
        out.push(PAGE_OPEN.to_string());
        match corpus.get(u) {
            Some(doc) => out.extend(doc.body.iter().take(BROWSE_TRUNCATION).cloned()),
            None => out.push(NOT_FOUND.to_string()),
        }
        out.push(PAGE_CLOSE.to_string());
    }
    out.join(" ")
}
