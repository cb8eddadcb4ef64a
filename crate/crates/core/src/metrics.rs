//! Evaluation measures: ranking recall, accuracy, ARI with a permutation
//! significance test, corpus BLEU and sentiment-match accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, UtteranceKey};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedGroup {
    pub group_id: String,
    pub scores: Vec<f64>,
    pub gold: usize,
}

impl RankedGroup {
    /// 1-based rank of the gold candidate. Equal scores rank the lower index first.
    pub fn gold_rank(&self) -> usize {
        let g = self.scores[self.gold];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > g || (s == g && i < self.gold))
            .count()
    }
}

pub fn recall_at_k(groups: &[RankedGroup], k: usize) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InsufficientData("no ranked groups".into()));
    }
    for g in groups {
        if g.gold >= g.scores.len() {
            return Err(Error::InvalidArgument(format!("group {}: gold index out of range", g.group_id)));
        }
        if g.scores.len() < k {
            return Err(Error::InvalidArgument(format!(
                "group {} has {} candidates, fewer than k={k}",
                g.group_id,
                g.scores.len()
            )));
        }
        if g.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("scores of group {}", g.group_id)));
        }
    }
    let hits = groups.iter().filter(|g| g.gold_rank() <= k).count();
    Ok(hits as f64 / groups.len() as f64)
}

pub fn accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            context: "accuracy".into(),
            expected: golds.len(),
            found: predictions.len(),
        });
    }
    if golds.is_empty() {
        return Err(Error::InsufficientData("accuracy over zero items".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

fn dense<T: Eq + Hash>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let v = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect();
    (v, ids.len())
}

/// Pair-counting ARI, `(Index − Expected) / (Max − Expected)`. When both
/// partitions are trivial in the same way (Max = Expected) the result is 1.
pub fn adjusted_rand_index<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "adjusted Rand index".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("ARI needs at least 2 points".into()));
    }
    let (da, ka) = dense(a);
    let (db, kb) = dense(b);
    Ok(ari_dense(&da, ka, &db, kb))
}

fn ari_dense(a: &[usize], ka: usize, b: &[usize], kb: usize) -> f64 {
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let index: f64 = table.iter().map(|&c| comb2(c)).sum();
    let sa: f64 = rows.iter().map(|&c| comb2(c)).sum();
    let sb: f64 = cols.iter().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub observed: f64,
    pub permutations: usize,
    /// Permutations whose ARI reached the observed value.
    pub at_least_observed: usize,
    pub p_value: f64,
    pub seed: u64,
}

/// Label-permutation test on the ARI: `p = (1 + c) / (m + 1)` where `c`
/// counts shuffles of `function_labels` with ARI ≥ observed. Trial `t`
/// shuffles with randomness keyed by `(seed, t)`.
pub fn permutation_test_ari<A: Eq + Hash, B: Eq + Hash>(
    cluster_labels: &[A],
    function_labels: &[B],
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if permutations < 99 {
        return Err(Error::InvalidArgument(format!(
            "permutation test needs at least 99 permutations, got {permutations}"
        )));
    }
    let observed = adjusted_rand_index(cluster_labels, function_labels)?;
    let (ca, ka) = dense(cluster_labels);
    let (fb, kb) = dense(function_labels);
    if ka < 2 || kb < 2 {
        return Err(Error::Degenerate("constant labels make the permutation test meaningless".into()));
    }
    let at_least = (0..permutations)
        .into_par_iter()
        .filter(|&t| {
            let mut r = rng::seeded(rng::derive_index(seed, t as u64));
            let mut shuffled = fb.clone();
            shuffled.shuffle(&mut r);
            ari_dense(&ca, ka, &shuffled, kb) >= observed
        })
        .count();
    Ok(PermutationTest {
        observed,
        permutations,
        at_least_observed: at_least,
        p_value: (1 + at_least) as f64 / (permutations + 1) as f64,
        seed,
    })
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and total candidate n-grams for one sentence.
pub fn modified_precision(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

/// Corpus BLEU over n = 1..=`max_n`, one reference per candidate. A zero
/// match count for n ≥ 2 is smoothed to `1 / (total + 1)`.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<BleuScore> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            context: "BLEU corpora".into(),
            expected: references.len(),
            found: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::InsufficientData("BLEU over an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU needs max_n ≥ 1".into()));
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, t) = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| modified_precision(c, r, n))
            .fold((0, 0), |(a, b), (m, t)| (a + m, b + t));
        let p = if n >= 2 && m == 0 {
            1.0 / (t + 1) as f64
        } else if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        };
        precisions.push(p);
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty: bp,
        candidate_length: c,
        reference_length: r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

pub trait SentimentClassifier: Sync {
    fn predict(&self, text: &str) -> Sentiment;
}

impl<F: Fn(&str) -> Sentiment + Sync> SentimentClassifier for F {
    fn predict(&self, text: &str) -> Sentiment {
        self(text)
    }
}

/// Logistic regression over unigram and bigram presence features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramLogistic {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
}

fn ngram_features(text: &str) -> BTreeSet<String> {
    let toks: Vec<String> = tokenize(text).into_iter().map(|t| t.to_lowercase()).collect();
    let mut f: BTreeSet<String> = toks.iter().cloned().collect();
    f.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    f
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl NgramLogistic {
    /// Full-batch gradient descent with L2 penalty `l2`.
    pub fn train(examples: &[(String, Sentiment)], epochs: usize, learning_rate: f64, l2: f64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InsufficientData("no sentiment training examples".into()));
        }
        let feats: Vec<(BTreeSet<String>, f64)> = examples
            .iter()
            .map(|(t, s)| (ngram_features(t), if *s == Sentiment::Positive { 1.0 } else { 0.0 }))
            .collect();
        let mut model = Self {
            weights: feats.iter().flat_map(|(f, _)| f.iter().map(|k| (k.clone(), 0.0))).collect(),
            bias: 0.0,
        };
        let n = feats.len() as f64;
        for _ in 0..epochs {
            let mut grad: BTreeMap<&str, f64> = BTreeMap::new();
            let mut gb = 0.0;
            for (f, y) in &feats {
                let err = sigmoid(model.score_features(f)) - y;
                gb += err;
                for k in f {
                    *grad.entry(k).or_insert(0.0) += err;
                }
            }
            for (k, w) in model.weights.iter_mut() {
                let g = grad.get(k.as_str()).copied().unwrap_or(0.0) / n + l2 * *w;
                *w -= learning_rate * g;
            }
            model.bias -= learning_rate * gb / n;
        }
        Ok(model)
    }

    fn score_features(&self, f: &BTreeSet<String>) -> f64 {
        self.bias + f.iter().filter_map(|k| self.weights.get(k)).sum::<f64>()
    }

    pub fn probability(&self, text: &str) -> f64 {
        sigmoid(self.score_features(&ngram_features(text)))
    }
}

impl SentimentClassifier for NgramLogistic {
    fn predict(&self, text: &str) -> Sentiment {
        if self.probability(text) >= 0.5 {
            Sentiment::Positive
        } else {
            Sentiment::Negative
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentMatch {
    pub accuracy: f64,
    pub pairs: usize,
    /// The classifier gave one label to every input.
    pub degenerate_classifier: bool,
}

pub fn sentiment_match_accuracy(
    manual: &[String],
    machine: &[String],
    classifier: &dyn SentimentClassifier,
) -> Result<SentimentMatch> {
    if manual.len() != machine.len() {
        return Err(Error::DimensionMismatch {
            context: "sentiment match".into(),
            expected: manual.len(),
            found: machine.len(),
        });
    }
    if manual.is_empty() {
        return Err(Error::InsufficientData("sentiment match over zero pairs".into()));
    }
    let a: Vec<Sentiment> = manual.par_iter().map(|t| classifier.predict(t)).collect();
    let b: Vec<Sentiment> = machine.par_iter().map(|t| classifier.predict(t)).collect();
    let distinct: BTreeSet<_> = a.iter().chain(&b).map(|s| *s == Sentiment::Positive).collect();
    let degenerate = distinct.len() < 2;
    if degenerate {
        log::warn!("sentiment classifier returned a single label for all {} inputs", 2 * a.len());
    }
    Ok(SentimentMatch {
        accuracy: accuracy(&a, &b)?,
        pairs: a.len(),
        degenerate_classifier: degenerate,
    })
}

/// The two pragmatic functions studied per particle.
pub fn default_functions() -> BTreeMap<String, [String; 2]> {
    [
        ("lah", ["friendliness", "hostility"]),
        ("meh", ["disagree", "surprise"]),
        ("hor", ["reduce-harshness", "solicit-agreement"]),
    ]
    .into_iter()
    .map(|(p, f)| (p.to_string(), f.map(String::from)))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionLabel {
    pub utterance_key: UtteranceKey,
    pub particle: String,
    pub function_label: String,
}

/// Reads `utterance_key,particle,function_label` rows, rejecting functions
/// not declared for the row's particle.
pub fn read_function_labels<R: Read>(r: R, functions: &BTreeMap<String, [String; 2]>) -> Result<Vec<FunctionLabel>> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(r).deserialize::<(String, String, String)>().enumerate() {
        let line = i + 2;
        let (key, particle, function_label) = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let allowed = functions.get(&particle).ok_or_else(|| Error::Parse {
            line,
            message: format!("particle `{particle}` has no declared functions"),
        })?;
        if !allowed.contains(&function_label) {
            return Err(Error::Parse {
                line,
                message: format!("`{function_label}` is not a declared function of `{particle}`"),
            });
        }
        out.push(FunctionLabel {
            utterance_key: key.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad utterance key `{key}`"),
            })?,
            particle,
            function_label,
        });
    }
    Ok(out)
}

pub fn write_function_labels<W: Write>(w: W, labels: &[FunctionLabel]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["utterance_key", "particle", "function_label"])
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    for l in labels {
        out.write_record([l.utterance_key.to_string().as_str(), &l.particle, &l.function_label])
            .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    }
    out.flush().map_err(|e| Error::io("<function labels>", e))
}

/// One entry of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub parameters: BTreeMap<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}
