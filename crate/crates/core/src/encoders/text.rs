use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed vocabulary. Index 0 is the unknown-word token.
pub const VOCAB: &[&str] = &[
    "<unk>",
    "the",
    "a",
    "an",
    "and",
    "with",
    "next",
    "to",
    "near",
    "of",
    "in",
    "on",
    "at",
    "by",
    "left",
    "right",
    "above",
    "below",
    "beside",
    "under",
    "over",
    "scene",
    "image",
    "photo",
    "picture",
    "showing",
    "shows",
    "there",
    "is",
    "are",
    "objects",
    "object",
    "shapes",
    "shape",
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "orange",
    "circle",
    "square",
    "triangle",
    "star",
    "diamond",
    "circles",
    "squares",
    "triangles",
    "stars",
    "diamonds",
    "one",
    "two",
    "three",
    "four",
    "five",
    "some",
    "several",
    "it",
    "this",
    "that",
    "sits",
    "lies",
    "appears",
    "together",
    "region",
    "colored",
    "big",
    "small",
    "while",
    "also",
    "touching",
];

pub const UNK: u32 = 0;

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token_id(word: &str) -> u32 {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .map_or(UNK, |i| i as u32)
}

/// Lower-cased alphanumeric words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Tokenized text. Tokenization is a pure function of the source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSeq {
    pub tokens: Vec<u32>,
    pub source_text: String,
}

impl TextSeq {
    /// Tokenizes `text`; the result may have no tokens.
    pub fn tokenize(text: &str) -> Self {
        Self {
            tokens: words(text).map(|w| token_id(&w)).collect(),
            source_text: text.to_string(),
        }
    }

    /// Tokenizes `text`, failing when it has no word tokens.
    pub fn new(text: &str) -> Result<Self> {
        let seq = Self::tokenize(text);
        if seq.tokens.is_empty() {
            return Err(Error::invalid(format!("text `{text}` has no tokens")));
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
