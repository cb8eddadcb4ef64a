//! Input layouts.
//!
//! NSP: `[CLS] u1 [SEP] u2 [SEP] u3 [SEP] candidate [SEP]`
//! P-Pred: `[CLS] d1 [SEP] d2 [SEP] d3' [SEP]`
//!
//! The final utterance and its separator are segment 1, everything before
//! it segment 0. When the sequence is too long, context tokens are dropped
//! from the left (oldest utterance first); separators are always kept.

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::taskgen::{NspExample, PPredExample};

/// Where a packed position came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    Special,
    /// `utterance` indexes the packed utterances (the final one is last),
    /// `index` the token inside it.
    Token { utterance: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub sources: Vec<TokenSource>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Packed index of token `index` of utterance `utterance`, if it survived truncation.
    pub fn position_of(&self, utterance: usize, index: usize) -> Option<usize> {
        self.sources
            .iter()
            .position(|s| *s == TokenSource::Token { utterance, index })
    }

    /// Index of the final utterance in `sources`.
    pub fn last_utterance(&self) -> usize {
        self.sources
            .iter()
            .filter_map(|s| match s {
                TokenSource::Token { utterance, .. } => Some(*utterance),
                TokenSource::Special => None,
            })
            .max()
            .unwrap_or(0)
    }
}

/// Packs `context` utterances followed by `last`.
pub fn pack_sequence(
    context: &[&[String]],
    last: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PackedInput> {
    let fixed = 1 + context.len() + last.len() + 1;
    if fixed > max_len {
        return Err(Error::InvalidArgument(format!(
            "final utterance needs {fixed} positions but the maximum length is {max_len}"
        )));
    }
    let context_tokens: usize = context.iter().map(|u| u.len()).sum();
    let mut overflow = (fixed + context_tokens).saturating_sub(max_len);

    let mut out = PackedInput {
        ids: vec![CLS_ID],
        segments: vec![0],
        sources: vec![TokenSource::Special],
    };
    for (u, tokens) in context.iter().enumerate() {
        let skip = overflow.min(tokens.len());
        overflow -= skip;
        for (i, t) in tokens.iter().enumerate().skip(skip) {
            out.ids.push(vocab.id(t));
            out.segments.push(0);
            out.sources.push(TokenSource::Token { utterance: u, index: i });
        }
        out.ids.push(SEP_ID);
        out.segments.push(0);
        out.sources.push(TokenSource::Special);
    }
    let u = context.len();
    for (i, t) in last.iter().enumerate() {
        out.ids.push(vocab.id(t));
        out.segments.push(1);
        out.sources.push(TokenSource::Token { utterance: u, index: i });
    }
    out.ids.push(SEP_ID);
    out.segments.push(1);
    out.sources.push(TokenSource::Special);
    Ok(out)
}

pub fn pack_nsp_input(example: &NspExample, vocab: &Vocabulary, max_len: usize) -> Result<PackedInput> {
    let [a, b, c] = &example.context.utterances;
    pack_sequence(
        &[&a.tokens, &b.tokens, &c.tokens],
        &example.candidate.tokens,
        vocab,
        max_len,
    )
}

pub fn pack_ppred_input(example: &PPredExample, vocab: &Vocabulary, max_len: usize) -> Result<PackedInput> {
    let [a, b] = &example.context;
    pack_sequence(&[&a.tokens, &b.tokens], &example.target.tokens, vocab, max_len)
}
