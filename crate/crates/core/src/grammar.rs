//! The flat turn grammar.
//!
//! ```text
//! SEARCH (q:<token>)+ END
//! BROWSE (u:<token>)+ g:<token> END
//! ANSWER (w:<token>)+ END
//! ```
//!
//! Tokens are separated by whitespace. Anything else is format-invalid.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::traj::Action;

pub const SEARCH: &str = "SEARCH";
pub const BROWSE: &str = "BROWSE";
pub const ANSWER: &str = "ANSWER";
pub const END: &str = "END";

pub const TAG_QUERY: &str = "q";
pub const TAG_URL: &str = "u";
pub const TAG_GOAL: &str = "g";
pub const TAG_WORD: &str = "w";

/// `tag:value`, with any whitespace inside `value` replaced by `_` so the
/// result stays a single token.
pub fn tagged(tag: &str, value: &str) -> String {
    let mut out = String::with_capacity(tag.len() + 1 + value.len());
    out.push_str(tag);
    out.push(':');
    let mut first = true;
    for part in value.split_whitespace() {
        if !first {
            out.push('_');
        }
        out.push_str(part);
        first = false;
    }
    out
}

fn untag<'a>(token: &'a str, tag: &str) -> Option<&'a str> {
    let rest = token.strip_prefix(tag)?.strip_prefix(':')?;
    (!rest.is_empty()).then_some(rest)
}

/// Tokens of an action as the agent emits them.
pub fn action_tokens(action: &Action) -> Vec<String> {
    let mut out = Vec::new();
    match action {
        Action::Search { queries } => {
            out.push(SEARCH.to_string());
            out.extend(queries.iter().map(|q| tagged(TAG_QUERY, q)));
            out.push(END.to_string());
        }
        Action::Browse { urls, goal } => {
            out.push(BROWSE.to_string());
            out.extend(urls.iter().map(|u| tagged(TAG_URL, u)));
            out.push(tagged(TAG_GOAL, goal));
            out.push(END.to_string());
        }
        Action::Answer { text } => {
            out.push(ANSWER.to_string());
            out.extend(text.split_whitespace().map(|w| tagged(TAG_WORD, w)));
            out.push(END.to_string());
        }
        Action::Tool { name, arguments } => {
            out.push("TOOL".to_string());
            out.push(tagged("t", name));
            out.extend(arguments.split_whitespace().map(ToString::to_string));
        }
        Action::Malformed { text } => {
            out.extend(text.split_whitespace().map(ToString::to_string));
        }
    }
    out
}

/// Renders an action as turn text.
pub fn render_action(action: &Action) -> String {
    action_tokens(action).join(" ")
}

/// Parses turn text into an action if it matches the grammar exactly.
pub fn parse_turn(text: &str) -> Option<Action> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let (&head, rest) = tokens.split_first()?;
    let (&last, body) = rest.split_last()?;
    if last != END || body.is_empty() {
        return None;
    }
    match head {
        SEARCH => {
            let queries = body
                .iter()
                .map(|t| untag(t, TAG_QUERY).map(ToString::to_string))
                .collect::<Option<Vec<_>>>()?;
            Some(Action::Search { queries })
        }
        BROWSE => {
            let (&goal, urls) = body.split_last()?;
            let goal = untag(goal, TAG_GOAL)?.to_string();
            if urls.is_empty() {
                return None;
            }
            let urls = urls
                .iter()
                .map(|t| untag(t, TAG_URL).map(ToString::to_string))
                .collect::<Option<Vec<_>>>()?;
            Some(Action::Browse { urls, goal })
        }
        ANSWER => {
            let words = body.iter().map(|t| untag(t, TAG_WORD)).collect::<Option<Vec<_>>>()?;
            Some(Action::Answer { text: words.join(" ") })
        }
        _ => None,
    }
}

/// `(true, Some(action))` iff `turn_text` matches the grammar.
pub fn validate_turn_format(turn_text: &str) -> (bool, Option<Action>) {
    match parse_turn(turn_text) {
        Some(action) => (true, Some(action)),
        None => (false, None),
    }
}
