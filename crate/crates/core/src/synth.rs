//! Seeded generators for the bundled synthetic data: a particle dialogue
//! corpus with planted pragmatic functions, and a dictionary-generated
//! language pair for the translation loop.
//!
//! Dialogue layout: two opening statements, then repeated
//! `(particle turn, reply, statement)` blocks, ending on a reply. A particle
//! turn carries cue words of one pragmatic function and ends with that
//! function's particle; the reply that follows opens with the function's
//! reply word and sometimes echoes the particle. Within a dialogue every
//! particle turn uses a different function, so a reply only fits its own
//! particle turn.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance, UtteranceKey};
use crate::error::{Error, Result};
use crate::metrics::FunctionLabel;
use crate::rng::{self, Rng};
use crate::translate::ParallelPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PragmaticFunction {
    pub particle: &'static str,
    pub name: &'static str,
    pub cues: &'static [&'static str],
    pub reply: &'static str,
}

pub const FUNCTIONS: [PragmaticFunction; 6] = [
    PragmaticFunction {
        particle: "lah",
        name: "friendliness",
        cues: &["come", "join", "relax", "enjoy", "together"],
        reply: "okay",
    },
    PragmaticFunction {
        particle: "lah",
        name: "hostility",
        cues: &["stop", "shut", "annoying", "useless", "lazy"],
        reply: "sorry",
    },
    PragmaticFunction {
        particle: "meh",
        name: "disagree",
        cues: &["cannot", "wrong", "never", "impossible", "doubt"],
        reply: "can",
    },
    PragmaticFunction {
        particle: "meh",
        name: "surprise",
        cues: &["really", "fainted", "won", "suddenly", "already"],
        reply: "wah",
    },
    PragmaticFunction {
        particle: "hor",
        name: "reduce-harshness",
        cues: &["maybe", "bit", "little", "slightly", "abit"],
        reply: "noted",
    },
    PragmaticFunction {
        particle: "hor",
        name: "solicit-agreement",
        cues: &["right", "nice", "agree", "correct", "same"],
        reply: "agreed",
    },
];

const TOPICS: [&[&str]; 6] = [
    &["food", "chicken", "rice", "hawker", "kopi", "laksa", "queue", "stall"],
    &["work", "boss", "meeting", "project", "office", "deadline", "report", "client"],
    &["school", "exam", "teacher", "homework", "class", "test", "notes", "tuition"],
    &["train", "bus", "mrt", "grab", "traffic", "jam", "station", "late"],
    &["weather", "rain", "hot", "umbrella", "sun", "haze", "wet", "cloudy"],
    &["game", "match", "team", "score", "player", "coach", "goal", "season"],
];

const FILLER: [&str; 14] = [
    "the", "this", "that", "you", "i", "we", "so", "very", "got", "also", "then", "go", "is", "one",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    pub dialogues: usize,
    pub min_blocks: usize,
    pub max_blocks: usize,
    /// Chance that a `meh` turn gets a trailing question mark.
    pub question_rate: f64,
    /// Chance that a reply ends with the particle it answers.
    pub echo_rate: f64,
    pub seed: u64,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self {
            dialogues: 240,
            min_blocks: 2,
            max_blocks: 4,
            question_rate: 0.3,
            echo_rate: 0.25,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDialogues {
    pub corpus: Corpus,
    /// The planted function of every particle turn.
    pub functions: Vec<FunctionLabel>,
}

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty list")
}

fn statement(rng: &mut Rng, topic: &[&str]) -> Vec<String> {
    let n = rng.gen_range(3..=6);
    (0..n)
        .map(|_| if rng.gen_bool(0.6) { pick(rng, topic) } else { pick(rng, &FILLER) }.to_string())
        .collect()
}

fn particle_turn(rng: &mut Rng, topic: &[&str], f: &PragmaticFunction, question_rate: f64) -> Vec<String> {
    let mut words = statement(rng, topic);
    words.truncate(rng.gen_range(1..=3));
    let cues = rng.gen_range(1..=2);
    for _ in 0..cues {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, pick(rng, f.cues).to_string());
    }
    words.push(f.particle.to_string());
    if f.particle == "meh" && rng.gen_bool(question_rate) {
        words.push("?".into());
    }
    words
}

fn reply(rng: &mut Rng, topic: &[&str], f: &PragmaticFunction, echo_rate: f64) -> Vec<String> {
    let mut words = vec![f.reply.to_string()];
    words.extend(statement(rng, topic).into_iter().take(rng.gen_range(2..=4)));
    if rng.gen_bool(echo_rate) {
        words.push(f.particle.to_string());
    }
    words
}

pub fn dialogues(cfg: &DialogueConfig) -> Result<SyntheticDialogues> {
    if cfg.min_blocks == 0 || cfg.max_blocks < cfg.min_blocks || cfg.max_blocks > FUNCTIONS.len() {
        return Err(Error::InvalidArgument(format!(
            "blocks per dialogue must satisfy 1 ≤ min ≤ max ≤ {}",
            FUNCTIONS.len()
        )));
    }
    let mut utterances = Vec::new();
    let mut functions = Vec::new();
    for d in 0..cfg.dialogues {
        let id = format!("syn{d:04}");
        let mut rng = rng::keyed(cfg.seed, &format!("dialogue/{id}"));
        let topic = TOPICS[rng.gen_range(0..TOPICS.len())];
        let blocks = rng.gen_range(cfg.min_blocks..=cfg.max_blocks);
        let mut order: Vec<&PragmaticFunction> = FUNCTIONS.iter().collect();
        order.shuffle(&mut rng);
        let speakers = ["A", "B"];
        let mut turns: Vec<Vec<String>> = vec![statement(&mut rng, topic), statement(&mut rng, topic)];
        for (b, f) in order.into_iter().take(blocks).enumerate() {
            if b > 0 {
                turns.push(statement(&mut rng, topic));
            }
            functions.push(FunctionLabel {
                utterance_key: UtteranceKey::new(id.clone(), turns.len()),
                particle: f.particle.to_string(),
                function_label: f.name.to_string(),
            });
            turns.push(particle_turn(&mut rng, topic, f, cfg.question_rate));
            turns.push(reply(&mut rng, topic, f, cfg.echo_rate));
        }
        for (t, words) in turns.into_iter().enumerate() {
            let mut u = Utterance::new(id.clone(), t, words.join(" "));
            u.speaker_id = Some(speakers[t % 2].to_string());
            utterances.push(u);
        }
    }
    Ok(SyntheticDialogues {
        corpus: Corpus::from_utterances(utterances)?,
        functions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub vocabulary: usize,
    pub seed_pairs: usize,
    pub monolingual: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Zipf exponent of word frequencies.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            vocabulary: 300,
            seed_pairs: 200,
            monolingual: 2000,
            min_length: 3,
            max_length: 8,
            zipf: 1.0,
            seed: 11,
        }
    }
}

/// A language pair generated from a known one-to-one word map with shared
/// word order, so the reference translation of any source line is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryLanguage {
    pub dictionary: BTreeMap<String, String>,
    pub seed_pairs: Vec<ParallelPair>,
    /// Source-language lines.
    pub monolingual_source: Vec<String>,
    /// Target-language lines, for reverse-mode back-translation.
    pub monolingual_target: Vec<String>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "tu", "se", "ra", "po", "ne", "chi", "ba", "go", "ye", "hu", "wa", "di", "ko",
];

impl DictionaryLanguage {
    pub fn translate(&self, source: &[String]) -> Vec<String> {
        source
            .iter()
            .map(|w| self.dictionary.get(w).cloned().unwrap_or_else(|| w.clone()))
            .collect()
    }
}

pub fn dictionary_language(cfg: &LanguageConfig) -> Result<DictionaryLanguage> {
    if cfg.vocabulary < 2 || cfg.min_length == 0 || cfg.max_length < cfg.min_length {
        return Err(Error::InvalidArgument("invalid dictionary language configuration".into()));
    }
    let mut rng = rng::keyed(cfg.seed, "dictionary");
    let mut used = BTreeSet::new();
    let mut source_words = Vec::with_capacity(cfg.vocabulary);
    while source_words.len() < cfg.vocabulary {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| pick(&mut rng, &SYLLABLES)).collect();
        if used.insert(w.clone()) {
            source_words.push(w);
        }
    }
    let target_words: Vec<String> = (0..cfg.vocabulary).map(|i| format!("w{i:03}")).collect();
    let dictionary: BTreeMap<String, String> = source_words.iter().cloned().zip(target_words.iter().cloned()).collect();
    let zipf = Zipf::new(cfg.vocabulary as u64, cfg.zipf).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let line = |rng: &mut Rng| -> Vec<usize> {
        let n = rng.gen_range(cfg.min_length..=cfg.max_length);
        (0..n).map(|_| zipf.sample(rng) as usize - 1).collect()
    };
    let seed_pairs = (0..cfg.seed_pairs)
        .map(|_| {
            let ids = line(&mut rng);
            ParallelPair {
                source: ids.iter().map(|&i| source_words[i].clone()).collect(),
                target: ids.iter().map(|&i| target_words[i].clone()).collect(),
                provenance: crate::translate::Provenance::Seed,
            }
        })
        .collect();
    let monolingual_source = (0..cfg.monolingual)
        .map(|_| line(&mut rng).iter().map(|&i| source_words[i].as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    let monolingual_target = (0..cfg.monolingual)
        .map(|_| line(&mut rng).iter().map(|&i| target_words[i].as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    Ok(DictionaryLanguage {
        dictionary,
        seed_pairs,
        monolingual_source,
        monolingual_target,
    })
}
