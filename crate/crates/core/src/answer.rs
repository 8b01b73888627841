//! Token text lookup and the yes/no answer-normalization table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever [`ANSWER_TABLE`] changes.
pub const ANSWER_TABLE_VERSION: u32 = 1;

/// Normalized token text → label. Matching happens after stripping whitespace,
/// subword markers and punctuation and lowercasing.
pub const ANSWER_TABLE: &[(&str, Answer)] = &[
    ("yes", Answer::Yes),
    ("no", Answer::No),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

/// Token id → surface text, stored as a JSON array of strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary(Vec<String>);

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        Self(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn text(&self, token: u32) -> Result<&str> {
        self.0
            .get(token as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::ShapeMismatch(format!("token {token} outside vocabulary")))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

/// Lowercased token text with whitespace, `▁`/`Ġ` markers and ASCII
/// punctuation removed.
pub fn normalize_token_text(text: &str) -> String {
    text.chars()
        .filter(|c| !c.is_whitespace() && *c != '▁' && *c != 'Ġ' && !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Label for a single token's text; `None` for tokens that carry no content
/// (pure whitespace or punctuation).
pub fn classify_token(text: &str) -> Option<Answer> {
    let norm = normalize_token_text(text);
    if norm.is_empty() {
        return None;
    }
    Some(
        ANSWER_TABLE
            .iter()
            .find(|(k, _)| *k == norm)
            .map_or(Answer::Unparseable, |(_, a)| *a),
    )
}

/// Label of the first content-bearing token, or `Unparseable` if none maps.
pub fn first_content_answer(tokens: &[u32], vocab: &Vocabulary) -> Result<Answer> {
    for &t in tokens {
        if let Some(a) = classify_token(vocab.text(t)?) {
            return Ok(a);
        }
    }
    Ok(Answer::Unparseable)
}

/// Index of the first token with content, if any.
pub fn first_content_position(tokens: &[u32], vocab: &Vocabulary) -> Result<Option<usize>> {
    for (i, &t) in tokens.iter().enumerate() {
        if classify_token(vocab.text(t)?).is_some() {
            return Ok(Some(i));
        }
    }
    Ok(None)
}
