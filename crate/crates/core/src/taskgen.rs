//! Training and evaluation sets for the next-sentence (NSP) and
//! particle-prediction (P-Pred) objectives.

use std::collections::HashSet;
use std::fmt;

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    balance_by_particle, detect_final_particle, extract_windows, mask_particle, Corpus,
    DialogueWindow, ParticleInventory, Utterance,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Candidate count per training context (one positive, one negative).
pub const TRAIN_CANDIDATES: usize = 2;
/// Candidate count per test context (one positive, nine negatives).
pub const TEST_CANDIDATES: usize = 10;
const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NspLabel {
    Next,
    Random,
    Related,
}

impl NspLabel {
    pub const ALL: [NspLabel; 3] = [NspLabel::Next, NspLabel::Random, NspLabel::Related];

    pub fn class_index(self) -> usize {
        match self {
            NspLabel::Next => 0,
            NspLabel::Random => 1,
            NspLabel::Related => 2,
        }
    }
}

impl fmt::Display for NspLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NspLabel::Next => "next",
            NspLabel::Random => "random",
            NspLabel::Related => "related",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NspExample {
    pub group_id: String,
    pub context: DialogueWindow,
    pub candidate: Utterance,
    pub label: NspLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PPredExample {
    pub group_id: String,
    pub context: [Utterance; 2],
    pub target: Utterance,
    pub gold: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionGroup {
    pub group_id: String,
    pub context: DialogueWindow,
    pub candidates: Vec<Utterance>,
    pub gold: usize,
}

/// A generated dataset plus the number of contexts that had to be dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated<T> {
    pub items: Vec<T>,
    pub skipped: usize,
}

struct NegativeSampler<'a> {
    corpus: &'a Corpus,
}

impl<'a> NegativeSampler<'a> {
    /// Uniform over same-dialogue turns other than the true next one.
    fn related(&self, rng: &mut Rng, window: &DialogueWindow, next: &Utterance, taken: &HashSet<&[String]>) -> Option<&'a Utterance> {
        let pool: Vec<&Utterance> = self
            .corpus
            .utterances()
            .iter()
            .filter(|u| {
                u.dialogue_id == window.last().dialogue_id
                    && u.turn_index != next.turn_index
                    && u.tokens != next.tokens
                    && !taken.contains(u.tokens.as_slice())
            })
            .collect();
        pool.choose(rng).copied()
    }

    /// Rejection-samples an utterance from another dialogue.
    fn random(&self, rng: &mut Rng, window: &DialogueWindow, next: &Utterance, taken: &HashSet<&[String]>) -> Option<&'a Utterance> {
        let all = self.corpus.utterances();
        (0..MAX_RESAMPLES).find_map(|_| {
            let u = &all[rng.gen_range(0..all.len())];
            (u.dialogue_id != window.last().dialogue_id
                && u.tokens != next.tokens
                && !taken.contains(u.tokens.as_slice()))
            .then_some(u)
        })
    }

    /// Draws one negative: a fair coin picks the kind, and the other kind is
    /// used only when the chosen one has no admissible candidate left.
    fn draw(&self, rng: &mut Rng, window: &DialogueWindow, next: &Utterance, taken: &HashSet<&[String]>) -> Option<(&'a Utterance, NspLabel)> {
        let related = |rng: &mut Rng| self.related(rng, window, next, taken).map(|u| (u, NspLabel::Related));
        let random = |rng: &mut Rng| self.random(rng, window, next, taken).map(|u| (u, NspLabel::Random));
        if rng.gen_bool(0.5) {
            related(rng).or_else(|| random(rng))
        } else {
            random(rng).or_else(|| related(rng))
        }
    }
}

fn usable_contexts<'a>(corpus: &'a Corpus, inventory: &ParticleInventory) -> Result<Vec<(DialogueWindow, &'a Utterance)>> {
    if corpus.dialogue_count() < 2 {
        return Err(Error::InsufficientData(
            "NSP needs at least two dialogues to draw random negatives".into(),
        ));
    }
    let contexts: Vec<_> = extract_windows(corpus, inventory)
        .into_iter()
        .filter_map(|w| {
            let next = corpus.get(&w.last().dialogue_id, w.last().turn_index + 1)?;
            Some((w, next))
        })
        .collect();
    if contexts.is_empty() {
        return Err(Error::InsufficientData(
            "no particle-final window is followed by another turn".into(),
        ));
    }
    Ok(contexts)
}

fn build_groups(
    corpus: &Corpus,
    inventory: &ParticleInventory,
    seed: u64,
    candidates: usize,
    tag: &str,
) -> Result<Generated<NspExample>> {
    let sampler = NegativeSampler { corpus };
    let mut items = Vec::new();
    let mut skipped = 0;
    for (window, next) in usable_contexts(corpus, inventory)? {
        let group_id = window.key().to_string();
        let mut rng = rng::keyed(seed, &format!("{tag}/{group_id}"));
        let mut taken: HashSet<&[String]> = HashSet::new();
        taken.insert(next.tokens.as_slice());
        let mut group = vec![(next, NspLabel::Next)];
        while group.len() < candidates {
            match sampler.draw(&mut rng, &window, next, &taken) {
                Some((u, label)) => {
                    taken.insert(u.tokens.as_slice());
                    group.push((u, label));
                }
                None => break,
            }
        }
        if group.len() < candidates {
            skipped += 1;
            continue;
        }
        group.shuffle(&mut rng);
        items.extend(group.into_iter().map(|(u, label)| NspExample {
            group_id: group_id.clone(),
            context: window.clone(),
            candidate: u.clone(),
            label,
        }));
    }
    if skipped > 0 {
        log::info!("{tag}: skipped {skipped} contexts without enough distinct distractors");
    }
    if items.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{tag}: every context lacked enough distinct distractors"
        )));
    }
    Ok(Generated { items, skipped })
}

/// One positive and one negative per usable context.
pub fn build_nsp_train(corpus: &Corpus, inventory: &ParticleInventory, seed: u64) -> Result<Generated<NspExample>> {
    build_groups(corpus, inventory, seed, TRAIN_CANDIDATES, "nsp-train")
}

/// Groups of ten: the true next utterance plus nine distinct negatives.
pub fn build_nsp_test(corpus: &Corpus, inventory: &ParticleInventory, seed: u64) -> Result<Generated<NspExample>> {
    build_groups(corpus, inventory, seed, TEST_CANDIDATES, "nsp-test")
}

pub fn build_ppred(corpus: &Corpus, inventory: &ParticleInventory, seed: u64) -> Result<Vec<PPredExample>> {
    let windows = balance_by_particle(&extract_windows(corpus, inventory), inventory, seed)?;
    windows
        .into_iter()
        .map(|w| {
            let target = mask_particle(w.last(), &w.occurrence)?;
            let [a, b, _] = w.utterances;
            Ok(PPredExample {
                group_id: w.occurrence.key.to_string(),
                context: [a, b],
                target,
                gold: w.occurrence.particle,
            })
        })
        .collect()
}

/// For each positive whose candidate ends in a particle, builds a group of
/// the original plus one copy per other particle. Candidates follow
/// inventory order.
pub fn build_nsp_on_ppred_test(
    positives: &[NspExample],
    inventory: &ParticleInventory,
) -> Generated<SubstitutionGroup> {
    let mut items = Vec::new();
    let mut skipped = 0;
    for ex in positives.iter().filter(|e| e.label == NspLabel::Next) {
        let Some(occ) = detect_final_particle(&ex.candidate, inventory) else {
            skipped += 1;
            continue;
        };
        let mut gold = 0;
        let candidates = inventory
            .particles()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if *p == occ.particle {
                    gold = i;
                    return ex.candidate.clone();
                }
                let mut tokens = ex.candidate.tokens.clone();
                tokens[occ.token_position] = p.clone();
                let mut u = Utterance::from_tokens(ex.candidate.dialogue_id.clone(), ex.candidate.turn_index, tokens);
                u.speaker_id = ex.candidate.speaker_id.clone();
                u
            })
            .collect();
        items.push(SubstitutionGroup {
            group_id: ex.group_id.clone(),
            context: ex.context.clone(),
            candidates,
            gold,
        });
    }
    Generated { items, skipped }
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("dataset records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::corpus::MASK_TOKEN;

    /// `n` dialogues of six turns; turns 2 and 4 end in a particle.
    fn corpus(n: usize) -> Corpus {
        let mut utts = Vec::new();
        for d in 0..n {
            let p = ["lah", "meh", "hor"][d % 3];
            let q = ["hor", "lah", "meh"][d % 3];
            let texts = [
                format!("hello number {d}"),
                format!("eat already {d} ?"),
                format!("want to go {p}"),
                format!("ok can {d}"),
                format!("so tired {d} {q}"),
                format!("bye bye {d}"),
            ];
            for (t, s) in texts.iter().enumerate() {
                utts.push(Utterance::new(format!("d{d:03}"), t, s.as_str()));
            }
        }
        Corpus::from_utterances(utts).unwrap()
    }

    #[test]
    fn train_has_one_positive_one_negative_per_context() {
        let c = corpus(5);
        let inv = ParticleInventory::default();
        let set = build_nsp_train(&c, &inv, 3).unwrap();
        assert_eq!(set.items.len(), 20);
        assert_eq!(set.items.iter().filter(|e| e.label == NspLabel::Next).count(), 10);
        assert_eq!(build_nsp_train(&c, &inv, 3).unwrap(), set);
        for ex in &set.items {
            let next = c.get(&ex.context.last().dialogue_id, ex.context.last().turn_index + 1).unwrap();
            match ex.label {
                NspLabel::Next => assert_eq!(&ex.candidate, next),
                NspLabel::Related => {
                    assert_eq!(ex.candidate.dialogue_id, ex.context.last().dialogue_id);
                    assert_ne!(ex.candidate.tokens, next.tokens);
                }
                NspLabel::Random => assert_ne!(ex.candidate.dialogue_id, ex.context.last().dialogue_id),
            }
        }
    }

    #[test]
    fn single_dialogue_is_rejected() {
        assert!(matches!(
            build_nsp_train(&corpus(1), &ParticleInventory::default(), 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn test_groups_have_ten_distinct_candidates() {
        let c = corpus(12);
        let inv = ParticleInventory::default();
        let set = build_nsp_test(&c, &inv, 11).unwrap();
        let mut groups: BTreeMap<&str, Vec<&NspExample>> = BTreeMap::new();
        for e in &set.items {
            groups.entry(e.group_id.as_str()).or_default().push(e);
        }
        assert_eq!(groups.len() + set.skipped, 24);
        for g in groups.values() {
            assert_eq!(g.len(), 10);
            assert_eq!(g.iter().filter(|e| e.label == NspLabel::Next).count(), 1);
            let distinct: HashSet<_> = g.iter().map(|e| &e.candidate.tokens).collect();
            assert_eq!(distinct.len(), 10);
        }

        let other = build_nsp_test(&c, &inv, 12).unwrap();
        let positives = |s: &Generated<NspExample>| -> Vec<(String, Utterance)> {
            let mut v: Vec<_> = s
                .items
                .iter()
                .filter(|e| e.label == NspLabel::Next)
                .map(|e| (e.group_id.clone(), e.candidate.clone()))
                .collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            v
        };
        assert_eq!(positives(&set), positives(&other));
        assert_ne!(set.items, other.items);
    }

    #[test]
    fn ppred_is_balanced_and_masked() {
        let c = corpus(6);
        let inv = ParticleInventory::default();
        let set = build_ppred(&c, &inv, 5).unwrap();
        assert_eq!(set.len(), 12);
        for p in ["lah", "meh", "hor"] {
            assert_eq!(set.iter().filter(|e| e.gold == p).count(), 4);
        }
        for e in &set {
            assert_eq!(e.target.tokens.iter().filter(|t| *t == MASK_TOKEN).count(), 1);
        }
        let go = set.iter().find(|e| e.target.tokens.starts_with(&["want".to_string()])).unwrap();
        assert_eq!(go.target.tokens.last().unwrap(), MASK_TOKEN);
    }

    #[test]
    fn substitution_groups() {
        let ctx = build_nsp_train(&corpus(3), &ParticleInventory::default(), 0).unwrap().items[0]
            .context
            .clone();
        let pos = |text: &str| NspExample {
            group_id: "g".into(),
            context: ctx.clone(),
            candidate: Utterance::new("x", 9, text),
            label: NspLabel::Next,
        };
        let inv = ParticleInventory::default();
        let g = build_nsp_on_ppred_test(&[pos("want to go lah")], &inv);
        assert_eq!(g.items.len(), 1);
        let texts: Vec<String> = g.items[0].candidates.iter().map(|u| u.tokens.join(" ")).collect();
        assert_eq!(texts, vec!["want to go lah", "want to go meh", "want to go hor"]);
        assert_eq!(g.items[0].gold, 0);

        let many: Vec<_> = (0..7).map(|i| pos(&format!("ok {i} hor"))).collect();
        let g = build_nsp_on_ppred_test(&many, &inv);
        assert_eq!(g.items.len(), 7);
        assert!(g.items.iter().all(|x| x.candidates.len() == 3 && x.gold == 2));

        let g = build_nsp_on_ppred_test(&[pos("no particle here")], &inv);
        assert!(g.items.is_empty());
        assert_eq!(g.skipped, 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let set = build_ppred(&corpus(3), &ParticleInventory::default(), 1).unwrap();
        let text = to_jsonl(&set);
        let back: Vec<PPredExample> = from_jsonl(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(to_jsonl(&back), text);
    }
}
