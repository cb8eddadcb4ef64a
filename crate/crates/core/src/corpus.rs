//! Corpus ingestion, normalization and sentence-final particle handling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MASK_TOKEN: &str = "[MASK]";

pub const DEFAULT_PARTICLES: [&str; 3] = ["lah", "meh", "hor"];

/// Identifies an utterance inside a corpus.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtteranceKey {
    pub dialogue_id: String,
    pub turn: usize,
}

impl UtteranceKey {
    pub fn new(dialogue_id: impl Into<String>, turn: usize) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            turn,
        }
    }
}

impl fmt::Display for UtteranceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dialogue_id, self.turn)
    }
}

impl FromStr for UtteranceKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, turn) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("utterance key `{s}` lacks `:turn`")))?;
        let turn = turn
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("utterance key `{s}` has a bad turn")))?;
        Ok(Self::new(id, turn))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub speaker_id: Option<String>,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(dialogue_id: impl Into<String>, turn_index: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
            speaker_id: None,
            text,
            tokens,
        }
    }

    /// Builds an utterance whose tokens are taken verbatim.
    pub fn from_tokens(dialogue_id: impl Into<String>, turn_index: usize, tokens: Vec<String>) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
            speaker_id: None,
            text: tokens.join(" "),
            tokens,
        }
    }

    pub fn key(&self) -> UtteranceKey {
        UtteranceKey::new(self.dialogue_id.clone(), self.turn_index)
    }
}

pub fn is_punctuation_char(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{3001}'..='\u{3003}'
            | '\u{FF01}'..='\u{FF0F}'
            | '\u{FF1A}'..='\u{FF20}'
            | '\u{FF3B}'..='\u{FF40}'
            | '\u{FF5B}'..='\u{FF65}')
}

pub fn is_punctuation_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punctuation_char)
}

/// Lowercases, splits on whitespace and isolates every punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_punctuation_char(c) {
                if !current.is_empty() {
                    tokens.push(current.to_lowercase());
                    current.clear();
                }
                tokens.push(c.to_lowercase().collect());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current.to_lowercase());
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleInventory {
    particles: Vec<String>,
    aliases: BTreeMap<String, String>,
}

impl Default for ParticleInventory {
    fn default() -> Self {
        Self::new(DEFAULT_PARTICLES.iter().map(|p| p.to_string()).collect())
            .expect("default particles are distinct")
    }
}

impl ParticleInventory {
    pub fn new(particles: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &particles {
            if !seen.insert(p.as_str()) {
                return Err(Error::InvalidArgument(format!("particle `{p}` listed twice")));
            }
        }
        if particles.is_empty() {
            return Err(Error::InvalidArgument("particle inventory is empty".into()));
        }
        Ok(Self {
            particles,
            aliases: BTreeMap::new(),
        })
    }

    pub fn particles(&self) -> &[String] {
        &self.particles
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn add_alias(&mut self, variant: impl Into<String>, canonical: &str) -> Result<()> {
        if !self.particles.iter().any(|p| p == canonical) {
            return Err(Error::InvalidArgument(format!(
                "alias target `{canonical}` is not a canonical particle"
            )));
        }
        self.aliases.insert(variant.into().to_lowercase(), canonical.to_string());
        Ok(())
    }

    /// Reads `variant<TAB>canonical` lines; blank lines and `#` comments are skipped.
    pub fn load_aliases(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (variant, canonical) = line.split_once('\t').ok_or(Error::Parse {
                line: i + 1,
                message: "expected `variant<TAB>canonical`".into(),
            })?;
            self.add_alias(variant.trim(), canonical.trim())
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn resolve(&self, token: &str) -> Option<&str> {
        if let Some(p) = self.particles.iter().find(|p| p.as_str() == token) {
            return Some(p);
        }
        self.aliases.get(token).map(String::as_str)
    }

    pub fn index_of(&self, particle: &str) -> Option<usize> {
        self.particles.iter().position(|p| p == particle)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleOccurrence {
    pub key: UtteranceKey,
    pub particle: String,
    pub token_position: usize,
}

/// Three consecutive turns of one dialogue, the last ending in a particle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueWindow {
    pub utterances: [Utterance; 3],
    pub occurrence: ParticleOccurrence,
}

impl DialogueWindow {
    pub fn last(&self) -> &Utterance {
        &self.utterances[2]
    }

    pub fn particle(&self) -> &str {
        &self.occurrence.particle
    }

    pub fn key(&self) -> UtteranceKey {
        self.occurrence.key.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    JsonlDialogue,
    TsvLines,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl-dialogue" | "jsonl" => Ok(Self::JsonlDialogue),
            "tsv-lines" | "tsv" => Ok(Self::TsvLines),
            other => Err(Error::InvalidArgument(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    dialogue_id: String,
    turn: usize,
    #[serde(default)]
    speaker: Option<String>,
    text: String,
}

/// An immutable set of utterances with unique `(dialogue_id, turn)` keys.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    index: HashMap<UtteranceKey, usize>,
}

impl Corpus {
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self> {
        let mut index = HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if index.insert(u.key(), i).is_some() {
                return Err(Error::DuplicateKey {
                    dialogue_id: u.dialogue_id.clone(),
                    turn: u.turn_index,
                });
            }
        }
        Ok(Self { utterances, index })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, dialogue_id: &str, turn: usize) -> Option<&Utterance> {
        self.index
            .get(&UtteranceKey::new(dialogue_id, turn))
            .map(|&i| &self.utterances[i])
    }

    pub fn get_key(&self, key: &UtteranceKey) -> Option<&Utterance> {
        self.index.get(key).map(|&i| &self.utterances[i])
    }

    /// Dialogues in ascending id order, each listing its utterances by turn.
    pub fn dialogues(&self) -> BTreeMap<&str, Vec<&Utterance>> {
        let mut map: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
        for u in &self.utterances {
            map.entry(u.dialogue_id.as_str()).or_default().push(u);
        }
        for turns in map.values_mut() {
            turns.sort_by_key(|u| u.turn_index);
        }
        map
    }

    pub fn dialogue_count(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.dialogue_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Serializes as `jsonl-dialogue`, one record per utterance in corpus order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let mut obj = serde_json::Map::new();
            obj.insert("dialogue_id".into(), u.dialogue_id.clone().into());
            obj.insert("turn".into(), u.turn_index.into());
            if let Some(s) = &u.speaker_id {
                obj.insert("speaker".into(), s.clone().into());
            }
            obj.insert("text".into(), u.text.clone().into());
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }
}

pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Corpus> {
    let mut utterances = Vec::new();
    match format {
        CorpusFormat::JsonlDialogue => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                let mut u = Utterance::new(rec.dialogue_id, rec.turn, rec.text);
                u.speaker_id = rec.speaker;
                utterances.push(u);
            }
        }
        CorpusFormat::TsvLines => {
            for (i, line) in text.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() {
                    continue;
                }
                utterances.push(Utterance::new((i + 1).to_string(), 0, line));
            }
        }
    }
    Corpus::from_utterances(utterances)
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, format)
}

pub fn detect_final_particle(
    utterance: &Utterance,
    inventory: &ParticleInventory,
) -> Option<ParticleOccurrence> {
    let (position, token) = utterance
        .tokens
        .iter()
        .enumerate()
        .rev()
        .find(|(_, t)| !is_punctuation_token(t))?;
    let particle = inventory.resolve(token)?;
    Some(ParticleOccurrence {
        key: utterance.key(),
        particle: particle.to_string(),
        token_position: position,
    })
}

/// Replaces the particle token with [`MASK_TOKEN`]; the input is left untouched.
pub fn mask_particle(utterance: &Utterance, occ: &ParticleOccurrence) -> Result<Utterance> {
    let len = utterance.tokens.len();
    if occ.key != utterance.key() || occ.token_position >= len {
        return Err(Error::PositionMismatch {
            position: occ.token_position,
            len,
        });
    }
    let mut tokens = utterance.tokens.clone();
    tokens[occ.token_position] = MASK_TOKEN.to_string();
    Ok(Utterance {
        dialogue_id: utterance.dialogue_id.clone(),
        turn_index: utterance.turn_index,
        speaker_id: utterance.speaker_id.clone(),
        text: tokens.join(" "),
        tokens,
    })
}

pub fn extract_windows(corpus: &Corpus, inventory: &ParticleInventory) -> Vec<DialogueWindow> {
    let mut windows = Vec::new();
    for (id, turns) in corpus.dialogues() {
        for last in &turns {
            if last.turn_index < 2 {
                continue;
            }
            let Some(occurrence) = detect_final_particle(last, inventory) else {
                continue;
            };
            let (Some(first), Some(second)) = (
                corpus.get(id, last.turn_index - 2),
                corpus.get(id, last.turn_index - 1),
            ) else {
                continue;
            };
            windows.push(DialogueWindow {
                utterances: [first.clone(), second.clone(), (*last).clone()],
                occurrence,
            });
        }
    }
    windows
}

/// Counts windows per canonical particle, in inventory order.
pub fn particle_counts(windows: &[DialogueWindow], inventory: &ParticleInventory) -> Vec<(String, usize)> {
    inventory
        .particles()
        .iter()
        .map(|p| (p.clone(), windows.iter().filter(|w| w.particle() == p).count()))
        .collect()
}

/// Down-samples every particle class to the smallest class size. The
/// result keeps the input order.
pub fn balance_by_particle(
    windows: &[DialogueWindow],
    inventory: &ParticleInventory,
    seed: u64,
) -> Result<Vec<DialogueWindow>> {
    let counts = particle_counts(windows, inventory);
    let missing: Vec<String> = counts
        .iter()
        .filter(|(_, c)| *c == 0)
        .map(|(p, _)| p.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingParticles(missing));
    }
    let target = counts.iter().map(|(_, c)| *c).min().unwrap_or(0);
    let mut keep = vec![false; windows.len()];
    for particle in inventory.particles() {
        let mut idx: Vec<usize> = windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.particle() == particle)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng::keyed(seed, &format!("balance/{particle}"));
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(target) {
            keep[i] = true;
        }
    }
    Ok(windows
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(w, _)| w.clone())
        .collect())
}
