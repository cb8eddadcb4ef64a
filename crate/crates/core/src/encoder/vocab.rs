use std::collections::{BTreeMap, HashMap};

use crate::corpus::{Corpus, MASK_TOKEN};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

/// Token ↔ id map. Ids are dense from zero; the five special tokens occupy
/// ids 0..5 and ordinary tokens follow by descending frequency, ties broken
/// lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary id {i} must be {special}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("token `{t}` appears twice")));
            }
        }
        Ok(Self {
            tokens,
            ids,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

pub fn build_vocabulary(corpus: &Corpus, min_frequency: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for u in corpus.utterances() {
        for t in &u.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_frequency.max(1) && !SPECIAL_TOKENS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_frequency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::from_utterances(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Utterance::new(format!("d{i}"), 0, *t))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn min_frequency_filters() {
        let v = build_vocabulary(&corpus(&["a a b"]), 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn specials_plus_tokens() {
        let v = build_vocabulary(&corpus(&["x"]), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("x"), 5);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
    }

    #[test]
    fn ordering_is_deterministic() {
        let c = corpus(&["b a c", "c b", "c"]);
        let v1 = build_vocabulary(&c, 1).unwrap();
        let v2 = build_vocabulary(&c, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(&v1.tokens()[5..], &["c", "b", "a"]);
    }

    #[test]
    fn empty_corpus_fails() {
        assert!(build_vocabulary(&Corpus::default(), 1).is_err());
    }
}
