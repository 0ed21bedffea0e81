//! Fixed token vocabulary shared by the generator and the model.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reserved token ids.
pub const DUMMY: u32 = 0;
pub const TRIGGER: u32 = 1;
pub const MASK_END: u32 = 2;

/// Every token, in id order.
pub const TOKENS: &[&str] = &[
    "<dummy>",
    "<mask_start>",
    "<mask_end>",
    "segment",
    "every",
    "the",
    "leftmost",
    "rightmost",
    "largest",
    "two",
    "three",
    "except",
    "object",
    "red",
    "green",
    "blue",
    "yellow",
    "square",
    "circle",
    "triangle",
];

pub fn vocab_size() -> usize {
    TOKENS.len()
}

pub fn token_text(id: u32) -> Result<&'static str> {
    TOKENS
        .get(id as usize)
        .copied()
        .ok_or(Error::TokenOutOfRange { id, vocab: TOKENS.len() })
}

pub fn token_id(text: &str) -> Result<u32> {
    TOKENS
        .iter()
        .position(|&t| t == text)
        .map(|i| i as u32)
        .ok_or_else(|| Error::Dataset(format!("unknown token {text:?}")))
}

/// Join token texts with spaces (special tokens render as their tags).
pub fn render_text(ids: &[u32]) -> Result<String> {
    let words: Result<Vec<&str>> = ids.iter().map(|&id| token_text(id)).collect();
    Ok(words?.join(" "))
}

/// Sidecar `vocab.json` payload mapping id to string by index.
#[derive(Debug, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: Vec<String>,
}

impl VocabFile {
    pub fn current() -> Self {
        VocabFile { tokens: TOKENS.iter().map(|t| t.to_string()).collect() }
    }
}
