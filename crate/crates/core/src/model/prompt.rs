// SPDX-License-Identifier: MIT OR Apache-2.0

//! Segmented prompt construction.
//!
//! A context+query prompt such as
//! `Honda Civic, produced by Honda. The original language of A Secret was`
//! is split into labelled pieces
//!
//! ```text
//! C_REL  [BOS]
//! C_SUBJ "Honda Civic"
//! C_REL  ", produced by"
//! C_OBJ  " Honda"
//! Q_REL  ". The original language of"
//! Q_SUBJ " A Secret"
//! Q_REL  " was"
//! ```
//!
//! Each piece is tokenized on its own and the ids concatenated, so segment
//! ranges are exact by construction. Whitespace separating two pieces is
//! attached to the front of the following piece, which is where byte-level
//! BPE puts it. A BOS token, when the model has one, joins the first
//! relation segment; that segment is emitted even if it holds only BOS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer};

pub const SUBJECT_SLOT: &str = "[X]";
pub const OBJECT_SLOT: &str = "[Y]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentLabel {
    #[serde(rename = "C_SUBJ")]
    ContextSubject,
    #[serde(rename = "C_REL")]
    ContextRelation,
    #[serde(rename = "C_OBJ")]
    ContextObject,
    #[serde(rename = "Q_SUBJ")]
    QuerySubject,
    #[serde(rename = "Q_REL")]
    QueryRelation,
}

impl SegmentLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentLabel::ContextSubject => "C_SUBJ",
            SegmentLabel::ContextRelation => "C_REL",
            SegmentLabel::ContextObject => "C_OBJ",
            SegmentLabel::QuerySubject => "Q_SUBJ",
            SegmentLabel::QueryRelation => "Q_REL",
        }
    }

    pub fn is_context(self) -> bool {
        matches!(
            self,
            SegmentLabel::ContextSubject | SegmentLabel::ContextRelation | SegmentLabel::ContextObject
        )
    }
}

impl std::fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Label with its ordinal, e.g. `C_OBJ3`.
    pub fn tag(&self, index: usize) -> String {
        format!("{}{}", self.label, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "Q_only")]
    QueryOnly,
    #[serde(rename = "C_plus_Q")]
    ContextPlusQuery,
}

/// `(subject, template, object)` used as the prepended context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFact {
    pub subject: String,
    pub template: String,
    pub object: String,
}

/// `(subject, template)`; the template is cut at the object slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFact {
    pub subject: String,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub condition: Condition,
    /// Position 0 holds a BOS token.
    pub has_bos: bool,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn last_position(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn label_sequence(&self) -> Vec<SegmentLabel> {
        self.segments.iter().map(|s| s.label).collect()
    }

    /// All token positions covered by segments with any of `labels`.
    pub fn positions_of(&self, labels: &[SegmentLabel]) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| labels.contains(&s.label))
            .flat_map(|s| s.positions())
            .collect()
    }

    pub fn has_segment(&self, label: SegmentLabel) -> bool {
        self.segments.iter().any(|s| s.label == label)
    }

    /// Positions of every context (`C_*`) segment.
    pub fn context_positions(&self) -> Vec<usize> {
        self.positions_of(&[
            SegmentLabel::ContextSubject,
            SegmentLabel::ContextRelation,
            SegmentLabel::ContextObject,
        ])
    }

    /// Positions of every query (`Q_*`) segment.
    pub fn query_positions(&self) -> Vec<usize> {
        self.positions_of(&[SegmentLabel::QuerySubject, SegmentLabel::QueryRelation])
    }

    /// Text of the context part (everything before the query).
    pub fn context_text(&self, tokenizer: &Tokenizer) -> String {
        let ids: Vec<TokenId> = self
            .segments
            .iter()
            .filter(|s| s.label.is_context())
            .flat_map(|s| s.positions())
            .filter(|&p| !(self.has_bos && p == 0))
            .map(|p| self.token_ids[p])
            .collect();
        tokenizer.decode(&ids)
    }

    /// Check the tiling and condition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for s in &self.segments {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Invalid(format!(
                    "segments do not tile the prompt at position {cursor}"
                )));
            }
            cursor = s.end;
        }
        if cursor != self.token_ids.len() {
            return Err(Error::Invalid("segments do not cover the whole prompt".into()));
        }
        match self.condition {
            Condition::QueryOnly => {
                if self.segments.iter().any(|s| s.label.is_context()) {
                    return Err(Error::Invalid("Q-only prompt has context segments".into()));
                }
            }
            Condition::ContextPlusQuery => {
                for label in [
                    SegmentLabel::ContextSubject,
                    SegmentLabel::ContextObject,
                    SegmentLabel::QuerySubject,
                ] {
                    if !self.has_segment(label) {
                        return Err(Error::MissingSegment(label.to_string()));
                    }
                }
            }
        }
        Ok(())
    }
}

fn split_slot<'a>(template: &'a str, slot: &'static str) -> Result<(&'a str, &'a str)> {
    template.split_once(slot).ok_or_else(|| Error::TemplateSlot {
        template: template.to_string(),
        slot,
    })
}

struct Pieces {
    pieces: Vec<(SegmentLabel, String)>,
}

impl Pieces {
    fn push(&mut self, label: SegmentLabel, text: &str) {
        self.pieces.push((label, text.to_string()));
    }

    /// Move whitespace between pieces onto the following piece.
    fn normalize(mut self) -> Vec<(SegmentLabel, String)> {
        for i in 0..self.pieces.len().saturating_sub(1) {
            let trimmed_len = self.pieces[i].1.trim_end().len();
            if trimmed_len < self.pieces[i].1.len() {
                let tail = self.pieces[i].1.split_off(trimmed_len);
                self.pieces[i + 1].1.insert_str(0, &tail);
            }
        }
        self.pieces
    }
}

/// Render the text of a prompt without tokenizing it.
pub fn prompt_text(
    context: Option<&ContextFact>,
    query: &QueryFact,
    condition: Condition,
) -> Result<String> {
    Ok(layout(context, query, condition)?
        .into_iter()
        .map(|(_, t)| t)
        .collect())
}

fn layout(
    context: Option<&ContextFact>,
    query: &QueryFact,
    condition: Condition,
) -> Result<Vec<(SegmentLabel, String)>> {
    let mut p = Pieces { pieces: Vec::new() };
    let (q_prefix, q_rest) = split_slot(&query.template, SUBJECT_SLOT)?;
    let q_suffix = match q_rest.split_once(OBJECT_SLOT) {
        Some((before, _)) => before,
        None => q_rest,
    }
    .trim_end();

    match condition {
        Condition::QueryOnly => {
            p.push(SegmentLabel::QueryRelation, q_prefix);
        }
        Condition::ContextPlusQuery => {
            let ctx = context.ok_or_else(|| {
                Error::Invalid("C+Q prompt requested without a context fact".into())
            })?;
            let (c_prefix, c_rest) = split_slot(&ctx.template, SUBJECT_SLOT)?;
            let (c_middle, c_tail) = split_slot(c_rest, OBJECT_SLOT)?;
            let mut c_tail = c_tail.trim_end().to_string();
            if !c_tail.ends_with('.') {
                c_tail.push('.');
            }
            p.push(SegmentLabel::ContextRelation, c_prefix);
            p.push(SegmentLabel::ContextSubject, &ctx.subject);
            p.push(SegmentLabel::ContextRelation, c_middle);
            p.push(SegmentLabel::ContextObject, &ctx.object);
            p.push(SegmentLabel::QueryRelation, &format!("{c_tail} {q_prefix}"));
        }
    }
    p.push(SegmentLabel::QuerySubject, &query.subject);
    p.push(SegmentLabel::QueryRelation, q_suffix);

    // fold neighbouring empty pieces away after whitespace normalization,
    // but keep the leading relation piece (it may carry BOS)
    let pieces = p.normalize();
    let mut out: Vec<(SegmentLabel, String)> = Vec::with_capacity(pieces.len());
    for (i, (label, text)) in pieces.into_iter().enumerate() {
        if text.is_empty() && i != 0 {
            continue;
        }
        match out.last_mut() {
            Some((prev, prev_text)) if *prev == label && !text.is_empty() => prev_text.push_str(&text),
            _ => out.push((label, text)),
        }
    }
    Ok(out)
}

/// Tokenize a prompt with exact segment ranges.
pub fn build_prompt(
    tokenizer: &Tokenizer,
    bos: Option<TokenId>,
    context: Option<&ContextFact>,
    query: &QueryFact,
    condition: Condition,
) -> Result<TokenizedPrompt> {
    let pieces = layout(context, query, condition)?;
    let mut token_ids = Vec::new();
    let mut segments = Vec::new();
    let mut text = String::new();
    for (i, (label, piece)) in pieces.iter().enumerate() {
        let start = token_ids.len();
        if i == 0 {
            if let Some(b) = bos {
                token_ids.push(b);
            }
        }
        token_ids.extend(tokenizer.encode(piece)?);
        text.push_str(piece);
        if token_ids.len() > start {
            segments.push(Segment {
                label: *label,
                start,
                end: token_ids.len(),
            });
        }
    }
    let prompt = TokenizedPrompt {
        text,
        token_ids,
        segments,
        condition,
        has_bos: bos.is_some(),
    };
    prompt.validate()?;
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::bytes_to_unicode;
    use std::collections::HashMap;

    fn byte_tok() -> Tokenizer {
        let vocab: HashMap<String, TokenId> = bytes_to_unicode()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as TokenId))
            .chain(std::iter::once(("<|endoftext|>".to_string(), 256)))
            .collect();
        Tokenizer::new(vocab, vec![]).unwrap()
    }

    fn honda() -> ContextFact {
        ContextFact {
            subject: "Honda Civic".into(),
            template: "[X], produced by [Y]".into(),
            object: "Honda".into(),
        }
    }

    fn secret() -> QueryFact {
        QueryFact {
            subject: "A Secret".into(),
            template: "The original language of [X] was".into(),
        }
    }

    fn segment_texts(tok: &Tokenizer, p: &TokenizedPrompt) -> Vec<(String, String)> {
        p.segments
            .iter()
            .map(|s| (s.label.to_string(), tok.decode(&p.token_ids[s.positions()])))
            .collect()
    }

    #[test]
    fn context_plus_query_layout() {
        let tok = byte_tok();
        let p = build_prompt(&tok, Some(256), Some(&honda()), &secret(), Condition::ContextPlusQuery)
            .unwrap();
        assert_eq!(
            p.text,
            "Honda Civic, produced by Honda. The original language of A Secret was"
        );
        let segs = segment_texts(&tok, &p);
        let want = [
            ("C_REL", "<|endoftext|>"),
            ("C_SUBJ", "Honda Civic"),
            ("C_REL", ", produced by"),
            ("C_OBJ", " Honda"),
            ("Q_REL", ". The original language of"),
            ("Q_SUBJ", " A Secret"),
            ("Q_REL", " was"),
        ];
        assert_eq!(segs.len(), want.len());
        for ((l, t), (wl, wt)) in segs.iter().zip(want) {
            assert_eq!((l.as_str(), t.as_str()), (wl, wt));
        }
    }

    #[test]
    fn query_only_layout() {
        let tok = byte_tok();
        let p = build_prompt(&tok, None, None, &secret(), Condition::QueryOnly).unwrap();
        assert_eq!(p.text, "The original language of A Secret was");
        assert!(p.context_positions().is_empty());
        assert_eq!(
            p.label_sequence(),
            vec![SegmentLabel::QueryRelation, SegmentLabel::QuerySubject, SegmentLabel::QueryRelation]
        );
    }

    #[test]
    fn query_template_cut_at_object_slot() {
        let tok = byte_tok();
        let q = QueryFact {
            subject: "Montana".into(),
            template: "[X] borders with [Y].".into(),
        };
        let p = build_prompt(&tok, Some(256), None, &q, Condition::QueryOnly).unwrap();
        assert_eq!(p.text, "Montana borders with");
        // BOS-only leading relation segment
        assert_eq!(p.segments[0].len(), 1);
        assert_eq!(p.segments[1].label, SegmentLabel::QuerySubject);
    }

    #[test]
    fn table_template_with_trailing_period() {
        let tok = byte_tok();
        let ctx = ContextFact {
            subject: "Dominique Sanda".into(),
            template: "The mother tongue of [X] is [Y].".into(),
            object: "French".into(),
        };
        let p = build_prompt(&tok, Some(256), Some(&ctx), &secret(), Condition::ContextPlusQuery).unwrap();
        assert!(p.has_bos);
        assert_eq!(
            p.text,
            "The mother tongue of Dominique Sanda is French. The original language of A Secret was"
        );
        assert_eq!(p.context_text(&tok), "The mother tongue of Dominique Sanda is French");
    }

    #[test]
    fn missing_slot_is_error() {
        let tok = byte_tok();
        let bad = QueryFact {
            subject: "x".into(),
            template: "no slot here".into(),
        };
        assert!(matches!(
            build_prompt(&tok, None, None, &bad, Condition::QueryOnly),
            Err(Error::TemplateSlot { .. })
        ));
        let mut ctx = honda();
        ctx.template = "[X] without object".into();
        assert!(build_prompt(&tok, None, Some(&ctx), &secret(), Condition::ContextPlusQuery).is_err());
    }
}
