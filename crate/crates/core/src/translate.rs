//! Word-alignment translation (IBM Model 1 with greedy decoding), a
//! line-in/line-out external translator adapter, and the iterative
//! back-translation augmentation loop.
//!
//! Text is split on whitespace; tokens are matched case-sensitively.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{bleu, BleuScore};
use crate::rng;

pub fn split_words(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Seed,
    Synthetic(usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Seed => f.write_str("seed"),
            Provenance::Synthetic(k) => write!(f, "synthetic-iter-{k}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "seed" {
            return Ok(Provenance::Seed);
        }
        s.strip_prefix("synthetic-iter-")
            .and_then(|k| k.parse().ok())
            .map(Provenance::Synthetic)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown provenance `{s}`")))
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub provenance: Provenance,
}

impl ParallelPair {
    pub fn new(source: &str, target: &str) -> Result<Self> {
        let pair = Self {
            source: split_words(source),
            target: split_words(target),
            provenance: Provenance::Seed,
        };
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(Error::InvalidArgument(format!("empty side in pair `{source}` / `{target}`")));
        }
        Ok(pair)
    }
}

/// Parses `source<TAB>target[<TAB>provenance]` lines.
pub fn parse_parallel(text: &str) -> Result<Vec<ParallelPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected `source<TAB>target`".into(),
            });
        }
        let mut pair = ParallelPair::new(cols[0], cols[1]).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(p) = cols.get(2) {
            pair.provenance = p.parse().map_err(|e: Error| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn parallel_to_tsv(pairs: &[ParallelPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.source.join(" "), p.target.join(" "), p.provenance))
        .collect()
}

pub fn load_parallel(path: &Path) -> Result<Vec<ParallelPair>> {
    parse_parallel(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// One line per text, blank lines dropped.
pub fn load_monolingual(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect())
}

/// `t(target | source)`; each source row sums to one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LexicalTable {
    pub rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl LexicalTable {
    pub fn prob(&self, source: &str, target: &str) -> f64 {
        self.rows.get(source).and_then(|r| r.get(target)).copied().unwrap_or(0.0)
    }

    /// Most probable target; ties go to the lexicographically smaller word.
    pub fn best(&self, source: &str) -> Option<&str> {
        self.rows.get(source).and_then(|row| {
            row.iter()
                .fold(None, |best: Option<(&String, f64)>, (t, &p)| match best {
                    Some((_, bp)) if bp >= p => best,
                    _ => Some((t, p)),
                })
                .map(|(t, _)| t.as_str())
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, row) in &self.rows {
            for (t, p) in row {
                out.push_str(&format!("{s}\t{t}\t{p}\n"));
            }
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Parse {
                line: i + 1,
                message: "expected `source<TAB>target<TAB>probability`".into(),
            };
            if cols.len() != 3 {
                return Err(bad());
            }
            let p: f64 = cols[2].trim().parse().map_err(|_| bad())?;
            if !(p >= 0.0) {
                return Err(bad());
            }
            rows.entry(cols[0].into()).or_default().insert(cols[1].into(), p);
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub table: LexicalTable,
    /// Training log-likelihood before the first iteration, then after each.
    pub log_likelihood: Vec<f64>,
}

struct Interned {
    src: Vec<Vec<usize>>,
    tgt: Vec<Vec<usize>>,
    src_words: Vec<String>,
    tgt_words: Vec<String>,
}

fn intern(pairs: &[ParallelPair]) -> Interned {
    let mut s_ids: HashMap<&str, usize> = HashMap::new();
    let mut t_ids: HashMap<&str, usize> = HashMap::new();
    let mut src_words = Vec::new();
    let mut tgt_words = Vec::new();
    let src = pairs
        .iter()
        .map(|p| {
            p.source
                .iter()
                .map(|w| {
                    *s_ids.entry(w.as_str()).or_insert_with(|| {
                        src_words.push(w.clone());
                        src_words.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    let tgt = pairs
        .iter()
        .map(|p| {
            p.target
                .iter()
                .map(|w| {
                    *t_ids.entry(w.as_str()).or_insert_with(|| {
                        tgt_words.push(w.clone());
                        tgt_words.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    Interned {
        src,
        tgt,
        src_words,
        tgt_words,
    }
}

/// IBM Model 1 trained by EM from a uniform table. Pairs contribute in input
/// order, so the result does not depend on thread count.
pub fn train_alignment(pairs: &[ParallelPair], em_iterations: usize) -> Result<Alignment> {
    if em_iterations == 0 {
        return Err(Error::InvalidArgument("em_iterations must be at least 1".into()));
    }
    let data = intern(pairs);
    if data.src_words.is_empty() || data.tgt_words.is_empty() {
        return Err(Error::InsufficientData("alignment needs a non-empty vocabulary".into()));
    }
    // Co-occurring (source, target) entries, numbered.
    let mut entry_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut entries: Vec<(usize, usize)> = Vec::new();
    // Per pair: for every target position, the entry ids of each source token.
    let links: Vec<Vec<Vec<usize>>> = data
        .src
        .iter()
        .zip(&data.tgt)
        .map(|(s, t)| {
            t.iter()
                .map(|&w| {
                    s.iter()
                        .map(|&f| {
                            *entry_of.entry((f, w)).or_insert_with(|| {
                                entries.push((f, w));
                                entries.len() - 1
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut t = vec![1.0 / data.tgt_words.len() as f64; entries.len()];
    let log_likelihood = |t: &[f64]| -> f64 {
        links
            .par_iter()
            .map(|pair| {
                pair.iter()
                    .map(|srcs| (srcs.iter().map(|&e| t[e]).sum::<f64>() / srcs.len() as f64).ln())
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    };
    let mut trace = vec![log_likelihood(&t)];
    for _ in 0..em_iterations {
        let partial: Vec<Vec<(usize, f64)>> = links
            .par_chunks(64)
            .map(|chunk| {
                let mut out = Vec::new();
                for pair in chunk {
                    for srcs in pair {
                        let z: f64 = srcs.iter().map(|&e| t[e]).sum();
                        out.extend(srcs.iter().map(|&e| (e, t[e] / z)));
                    }
                }
                out
            })
            .collect();
        let mut counts = vec![0.0; entries.len()];
        for chunk in partial {
            for (e, c) in chunk {
                counts[e] += c;
            }
        }
        let mut totals = vec![0.0; data.src_words.len()];
        for (e, &(f, _)) in entries.iter().enumerate() {
            totals[f] += counts[e];
        }
        for (e, &(f, _)) in entries.iter().enumerate() {
            t[e] = counts[e] / totals[f];
        }
        trace.push(log_likelihood(&t));
    }
    if trace.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("alignment log-likelihood".into()));
    }
    let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (e, &(f, w)) in entries.iter().enumerate() {
        if t[e] > 0.0 {
            rows.entry(data.src_words[f].clone())
                .or_default()
                .insert(data.tgt_words[w].clone(), t[e]);
        }
    }
    Ok(Alignment {
        table: LexicalTable { rows },
        log_likelihood: trace,
    })
}

/// Word-for-word argmax decode; unknown tokens pass through.
pub fn translate_greedy(table: &LexicalTable, source: &[String]) -> Vec<String> {
    source
        .iter()
        .map(|w| table.best(w).unwrap_or(w).to_string())
        .collect()
}

/// Multi-word source phrases with fixed target phrases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhraseTable {
    pub entries: Vec<(Vec<String>, Vec<String>)>,
}

impl PhraseTable {
    pub fn insert(&mut self, source: &str, target: &str) -> Result<()> {
        let (s, t) = (split_words(source), split_words(target));
        if s.is_empty() {
            return Err(Error::InvalidArgument("empty alias source phrase".into()));
        }
        self.entries.push((s, t));
        Ok(())
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut table = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or(Error::Parse {
                line: i + 1,
                message: "expected `source phrase<TAB>target phrase`".into(),
            })?;
            table.insert(s, t).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Longest phrase matching at `tokens[at..]`; earlier entries win ties.
    fn longest_match(&self, tokens: &[String], at: usize) -> Option<&(Vec<String>, Vec<String>)> {
        self.entries
            .iter()
            .filter(|(s, _)| tokens[at..].starts_with(s))
            .fold(None, |best: Option<&(Vec<String>, Vec<String>)>, e| match best {
                Some(b) if b.0.len() >= e.0.len() => Some(b),
                _ => Some(e),
            })
    }
}

pub trait Translator: Sync {
    fn translate_line(&self, line: &str) -> Result<String>;

    fn translate_batch(&self, lines: &[String]) -> Result<Vec<String>> {
        lines.par_iter().map(|l| self.translate_line(l)).collect()
    }
}

/// Alias phrases first (longest match), then the lexical table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WordTranslator {
    pub table: LexicalTable,
    pub aliases: PhraseTable,
}

impl WordTranslator {
    pub fn translate_tokens(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            if let Some((s, t)) = self.aliases.longest_match(tokens, i) {
                out.extend(t.iter().cloned());
                i += s.len();
            } else {
                out.extend(translate_greedy(&self.table, &tokens[i..i + 1]));
                i += 1;
            }
        }
        out
    }
}

impl Translator for WordTranslator {
    fn translate_line(&self, line: &str) -> Result<String> {
        Ok(self.translate_tokens(&split_words(line)).join(" "))
    }
}

/// Runs `program args…` once per batch, feeding one line per input on stdin
/// and expecting exactly one line per input on stdout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternalTranslator {
    pub program: String,
    pub args: Vec<String>,
}

impl Translator for ExternalTranslator {
    fn translate_line(&self, line: &str) -> Result<String> {
        Ok(self.translate_batch(&[line.to_string()])?.remove(0))
    }

    fn translate_batch(&self, lines: &[String]) -> Result<Vec<String>> {
        if let Some(i) = lines.iter().position(|l| l.contains('\n')) {
            return Err(Error::External {
                line: i,
                message: "input contains a newline".into(),
            });
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External {
                line: 0,
                message: format!("cannot start `{}`: {e}", self.program),
            })?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let input: String = lines.iter().map(|l| format!("{l}\n")).collect();
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let stdout = child.stdout.take().expect("piped stdout");
        let mut out = Vec::with_capacity(lines.len());
        for l in BufReader::new(stdout).lines() {
            match l {
                Ok(l) => out.push(l),
                Err(e) => {
                    return Err(Error::External {
                        line: out.len(),
                        message: e.to_string(),
                    })
                }
            }
        }
        let write_result = writer.join().expect("writer thread");
        let output = child.wait_with_output().map_err(|e| Error::External {
            line: out.len(),
            message: e.to_string(),
        })?;
        if !output.status.success() {
            return Err(Error::External {
                line: out.len().min(lines.len().saturating_sub(1)),
                message: format!(
                    "exited with {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ),
            });
        }
        if let Err(e) = write_result {
            return Err(Error::External {
                line: out.len(),
                message: format!("writing input: {e}"),
            });
        }
        if out.len() != lines.len() {
            return Err(Error::External {
                line: out.len().min(lines.len()),
                message: format!("produced {} lines for {} inputs", out.len(), lines.len()),
            });
        }
        Ok(out)
    }
}

/// One output line per input line, order preserved.
pub fn translate_corpus(translator: &dyn Translator, lines: &[String]) -> Result<Vec<String>> {
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    translator.translate_batch(lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub iterations: usize,
    pub em_iterations: usize,
    pub max_length_ratio: f64,
    pub min_source_length: usize,
    pub heldout_fraction: f64,
    /// Train target→source and back-translate a monolingual target corpus.
    pub reverse: bool,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            em_iterations: 10,
            max_length_ratio: 3.0,
            min_source_length: 2,
            heldout_fraction: 0.2,
            reverse: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub pairs: usize,
    pub synthetic_generated: usize,
    pub synthetic_added: usize,
    pub heldout_bleu: BleuScore,
    pub log_likelihood: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopOutput {
    pub pairs: Vec<ParallelPair>,
    pub heldout: Vec<ParallelPair>,
    pub table: LexicalTable,
    pub iterations: Vec<IterationReport>,
}

impl LoopOutput {
    pub fn bleu_trace(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.heldout_bleu.score).collect()
    }
}

fn passes_filters(p: &ParallelPair, cfg: &LoopConfig) -> bool {
    let (s, t) = (p.source.len(), p.target.len());
    if s < cfg.min_source_length || t == 0 {
        return false;
    }
    s.max(t) as f64 / s.min(t) as f64 <= cfg.max_length_ratio
}

fn flipped(p: &ParallelPair) -> ParallelPair {
    ParallelPair {
        source: p.target.clone(),
        target: p.source.clone(),
        provenance: p.provenance,
    }
}

/// Splits off a held-out set from `seed_pairs`, then for each iteration
/// trains on the current pair set, synthesizes pairs from `monolingual`,
/// filters them and adds the survivors. Held-out BLEU is measured before the
/// first iteration and after each one.
///
/// Forward mode translates a monolingual source corpus with the
/// source→target model. Reverse mode trains target→source and translates a
/// monolingual target corpus, pairing synthetic sources with real targets.
pub fn backtranslate_loop(seed_pairs: &[ParallelPair], monolingual: &[String], cfg: &LoopConfig) -> Result<LoopOutput> {
    if seed_pairs.len() < 2 {
        return Err(Error::InsufficientData("back-translation needs at least 2 seed pairs".into()));
    }
    if !(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0) {
        return Err(Error::InvalidArgument("heldout_fraction must lie in (0, 1)".into()));
    }
    let mut shuffled = seed_pairs.to_vec();
    shuffled.shuffle(&mut rng::keyed(cfg.seed, "backtranslate-heldout"));
    let n_held = ((shuffled.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, shuffled.len() - 1);
    let heldout: Vec<ParallelPair> = shuffled.drain(..n_held).collect();
    let mut pairs: Vec<ParallelPair> = shuffled;
    let mut seen: BTreeSet<(Vec<String>, Vec<String>)> = pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect();

    let held_src: Vec<Vec<String>> = heldout.iter().map(|p| p.source.clone()).collect();
    let held_tgt: Vec<Vec<String>> = heldout.iter().map(|p| p.target.clone()).collect();
    let mono: Vec<Vec<String>> = monolingual.iter().map(|l| split_words(l)).filter(|t| !t.is_empty()).collect();

    let evaluate = |pairs: &[ParallelPair]| -> Result<(Alignment, BleuScore)> {
        let forward = train_alignment(pairs, cfg.em_iterations)?;
        let hyp: Vec<Vec<String>> = held_src.iter().map(|s| translate_greedy(&forward.table, s)).collect();
        let score = bleu(&hyp, &held_tgt, 4)?;
        Ok((forward, score))
    };

    let (mut forward, score) = evaluate(&pairs)?;
    let mut reports = vec![IterationReport {
        iteration: 0,
        pairs: pairs.len(),
        synthetic_generated: 0,
        synthetic_added: 0,
        heldout_bleu: score,
        log_likelihood: forward.log_likelihood.clone(),
    }];
    for k in 1..=cfg.iterations {
        let synthetic: Vec<ParallelPair> = if cfg.reverse {
            let reversed: Vec<ParallelPair> = pairs.iter().map(flipped).collect();
            let backward = train_alignment(&reversed, cfg.em_iterations)?;
            mono.par_iter()
                .map(|t| ParallelPair {
                    source: translate_greedy(&backward.table, t),
                    target: t.clone(),
                    provenance: Provenance::Synthetic(k),
                })
                .collect()
        } else {
            mono.par_iter()
                .map(|s| ParallelPair {
                    source: s.clone(),
                    target: translate_greedy(&forward.table, s),
                    provenance: Provenance::Synthetic(k),
                })
                .collect()
        };
        let generated = synthetic.len();
        let mut added = 0;
        for p in synthetic.into_iter().filter(|p| passes_filters(p, cfg)) {
            if seen.insert((p.source.clone(), p.target.clone())) {
                pairs.push(p);
                added += 1;
            }
        }
        if added == 0 {
            log::warn!("back-translation iteration {k}: no synthetic pair survived the filters");
        }
        let (next, score) = evaluate(&pairs)?;
        forward = next;
        reports.push(IterationReport {
            iteration: k,
            pairs: pairs.len(),
            synthetic_generated: generated,
            synthetic_added: added,
            heldout_bleu: score,
            log_likelihood: forward.log_likelihood.clone(),
        });
    }
    Ok(LoopOutput {
        pairs,
        heldout,
        table: forward.table,
        iterations: reports,
    })
}
