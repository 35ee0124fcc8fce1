//! Interleaved captions: connective text mixed with `[index]<phrase>`
//! entities.

use serde::{Deserialize, Serialize};

use crate::encoders::{InterleaveEntry, InterleaveNode};
use crate::error::{Error, ParseError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionPart {
    Text(String),
    Entity { ann_id: u64, phrase: String },
}

/// A caption entity with the char span of its whole `[index]<phrase>` token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntity {
    pub ann_id: u64,
    pub span: [usize; 2],
    pub phrase: String,
}

/// Parts never hold empty text and never hold two text parts in a row, so
/// every caption has exactly one serialized form.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedCaption {
    parts: Vec<CaptionPart>,
}

impl InterleavedCaption {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parts(&self) -> &[CaptionPart] {
        &self.parts
    }

    pub fn push_text(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if let Some(CaptionPart::Text(t)) = self.parts.last_mut() {
            t.push_str(text);
        } else {
            self.parts.push(CaptionPart::Text(text.to_string()));
        }
    }

    pub fn push_entity(&mut self, ann_id: u64, phrase: &str) {
        self.parts.push(CaptionPart::Entity {
            ann_id,
            phrase: phrase.to_string(),
        });
    }

    pub fn entities(&self) -> Vec<CaptionEntity> {
        let mut out = Vec::new();
        let mut at = 0;
        for p in &self.parts {
            match p {
                CaptionPart::Text(t) => at += t.chars().count(),
                CaptionPart::Entity { ann_id, phrase } => {
                    let len = entity_token(*ann_id, phrase).chars().count();
                    out.push(CaptionEntity {
                        ann_id: *ann_id,
                        span: [at, at + len],
                        phrase: phrase.clone(),
                    });
                    at += len;
                }
            }
        }
        out
    }

    pub fn entity_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, CaptionPart::Entity { .. }))
            .count()
    }

    /// The caption with markup removed.
    pub fn plain_text(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                CaptionPart::Text(t) => t.as_str(),
                CaptionPart::Entity { phrase, .. } => phrase.as_str(),
            })
            .collect()
    }

    /// Text entities separated by connective text.
    pub fn to_entry(&self) -> InterleaveEntry {
        InterleaveEntry::new(
            self.parts
                .iter()
                .map(|p| match p {
                    CaptionPart::Text(t) => InterleaveNode::Connection(t.clone()),
                    CaptionPart::Entity { phrase, .. } => InterleaveNode::TextSpan(phrase.clone()),
                })
                .collect(),
        )
    }
}

fn entity_token(ann_id: u64, phrase: &str) -> String {
    format!("[{ann_id}]<{phrase}>")
}

pub fn parse_caption(raw: &str) -> std::result::Result<InterleavedCaption, ParseError> {
    let chars: Vec<char> = raw.chars().collect();
    let mut cap = InterleavedCaption::new();
    let mut text = String::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] != '[' {
            text.push(chars[i]);
            i += 1;
            continue;
        }
        let open = i;
        i += 1;
        let digits_start = i;
        while i < chars.len() && chars[i] != ']' {
            if !chars[i].is_ascii_digit() {
                return Err(ParseError::new(i, "non-numeric index"));
            }
            i += 1;
        }
        if i == chars.len() {
            return Err(ParseError::new(open, "unclosed bracket"));
        }
        if i == digits_start {
            return Err(ParseError::new(i, "empty index"));
        }
        let digits: String = chars[digits_start..i].iter().collect();
        let ann_id: u64 = digits
            .parse()
            .map_err(|_| ParseError::new(digits_start, "index out of range"))?;
        i += 1;
        if chars.get(i) != Some(&'<') {
            return Err(ParseError::new(i, "expected `<` after index"));
        }
        let angle = i;
        i += 1;
        let phrase_start = i;
        while i < chars.len() && chars[i] != '>' {
            i += 1;
        }
        if i == chars.len() {
            return Err(ParseError::new(angle, "unclosed angle bracket"));
        }
        if i == phrase_start {
            return Err(ParseError::new(i, "empty phrase"));
        }
        let phrase: String = chars[phrase_start..i].iter().collect();
        i += 1;
        cap.push_text(&text);
        text.clear();
        cap.push_entity(ann_id, &phrase);
    }
    cap.push_text(&text);
    Ok(cap)
}

pub fn serialize_caption(c: &InterleavedCaption) -> Result<String> {
    let mut out = String::new();
    for p in &c.parts {
        match p {
            CaptionPart::Text(t) => {
                if t.contains('[') {
                    return Err(Error::invalid(format!(
                        "connective text `{t}` contains `[`"
                    )));
                }
                out.push_str(t);
            }
            CaptionPart::Entity { ann_id, phrase } => {
                if phrase.is_empty() || phrase.contains('>') {
                    return Err(Error::invalid(format!(
                        "phrase `{phrase}` is empty or contains `>`"
                    )));
                }
                out.push_str(&entity_token(*ann_id, phrase));
            }
        }
    }
    Ok(out)
}

/// Parses a query for single-shot inference. Beyond caption syntax it
/// accepts `[ref:SCENE:ANN]` for a visual reference. A query without any
/// entity becomes one text entity.
pub fn parse_query(raw: &str) -> std::result::Result<InterleaveEntry, ParseError> {
    let mut nodes = Vec::new();
    let mut rest = raw;
    let mut offset = 0;
    let mut caption_text = String::new();
    while let Some(pos) = rest.find("[ref:") {
        let head = &rest[..pos];
        caption_text.push_str(head);
        let after = &rest[pos + 5..];
        let close = after.find(']').ok_or_else(|| {
            ParseError::new(raw[..offset + pos].chars().count(), "unclosed bracket")
        })?;
        let body = &after[..close];
        let bad = || {
            ParseError::new(
                raw[..offset + pos + 5].chars().count(),
                "expected `ref:SCENE:ANN`",
            )
        };
        let (s, a) = body.split_once(':').ok_or_else(bad)?;
        let scene_id = s.trim().parse().map_err(|_| bad())?;
        let ann_id = a.trim().parse().map_err(|_| bad())?;
        flush(&mut nodes, &caption_text, offset)?;
        caption_text.clear();
        nodes.push(InterleaveNode::VisualRef { scene_id, ann_id });
        let consumed = pos + 5 + close + 1;
        offset += consumed;
        rest = &rest[consumed..];
    }
    caption_text.push_str(rest);
    flush(&mut nodes, &caption_text, offset)?;
    if !nodes.iter().any(InterleaveNode::is_entity) {
        let text = raw.trim();
        if text.is_empty() {
            return Err(ParseError::new(0, "empty query"));
        }
        return Ok(InterleaveEntry::new(vec![InterleaveNode::TextSpan(
            text.to_string(),
        )]));
    }
    Ok(InterleaveEntry::new(nodes))
}

fn flush(
    nodes: &mut Vec<InterleaveNode>,
    text: &str,
    offset: usize,
) -> std::result::Result<(), ParseError> {
    if text.is_empty() {
        return Ok(());
    }
    let cap = parse_caption(text).map_err(|e| ParseError::new(e.position + offset, &e.message))?;
    nodes.extend(cap.to_entry().nodes().iter().cloned());
    Ok(())
}
