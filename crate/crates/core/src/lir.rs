//! Particle isolation by embedding subtraction: `R = V − V′`, where `V`
//! encodes the original utterance and `V′` the same utterance with its
//! particle replaced by `[MASK]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_particle, DialogueWindow, ParticleInventory, ParticleOccurrence, Utterance, UtteranceKey};
use crate::encoder::archive::{ArchiveRecord, EmbeddingArchive};
use crate::encoder::model::{Encoder, SequenceEncoding};
use crate::encoder::pack::{pack_sequence, TokenSource};
use crate::encoder::tensor::Matrix;
use crate::encoder::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NaiveWord,
    LirWord,
    LirSentence,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NaiveWord, Method::LirWord, Method::LirSentence];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NaiveWord => "naive-word",
            Method::LirWord => "lir-word",
            Method::LirSentence => "lir-sentence",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown representation method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleRepresentation {
    pub key: UtteranceKey,
    pub particle: String,
    pub method: Method,
    pub vector: Vec<f64>,
    pub model_tag: String,
}

impl ParticleRepresentation {
    /// Archive record id: `<dialogue_id>:<turn>:<method>`.
    pub fn record_id(&self) -> String {
        format!("{}:{}", self.key, self.method)
    }
}

/// What a provider returns for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoded {
    Sentence(Vec<f64>),
    Tokens(SequenceEncoding),
}

impl Encoded {
    fn dim(&self) -> usize {
        match self {
            Encoded::Sentence(v) => v.len(),
            Encoded::Tokens(s) => s.dim(),
        }
    }

    fn sentence(&self) -> &[f64] {
        match self {
            Encoded::Sentence(v) => v,
            Encoded::Tokens(s) => s.cls(),
        }
    }

    /// Vector at token `index` of the final utterance.
    fn token(&self, index: usize) -> Result<&[f64]> {
        let Encoded::Tokens(s) = self else {
            return Err(Error::Unsupported(
                "provider supplies sentence vectors only; word-level representations are unavailable".into(),
            ));
        };
        let last = s
            .sources
            .iter()
            .filter_map(|src| match src {
                TokenSource::Token { utterance, .. } => Some(*utterance),
                TokenSource::Special => None,
            })
            .max();
        last.and_then(|u| {
            s.sources
                .iter()
                .position(|src| *src == TokenSource::Token { utterance: u, index })
        })
        .and_then(|p| s.position(p))
        .ok_or_else(|| Error::NotFound(format!("token {index} is not present in the encoding")))
    }
}

/// One utterance to encode, with its preceding context.
#[derive(Clone, Copy, Debug)]
pub struct EncodeRequest<'a> {
    pub key: &'a UtteranceKey,
    pub masked: bool,
    pub context: &'a [Utterance],
    pub utterance: &'a Utterance,
}

pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn tag(&self) -> &str;
    fn encode(&self, request: &EncodeRequest<'_>) -> Result<Encoded>;
}

/// Encodes with the reference encoder using the particle-prediction layout
/// `[CLS] context… [SEP] utterance [SEP]`.
pub struct ReferenceProvider<'a> {
    pub encoder: &'a Encoder,
    pub vocab: &'a Vocabulary,
    pub tag: String,
    /// Include the two preceding turns.
    pub with_context: bool,
}

impl EmbeddingProvider for ReferenceProvider<'_> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn encode(&self, request: &EncodeRequest<'_>) -> Result<Encoded> {
        let context: Vec<&[String]> = if self.with_context {
            request.context.iter().map(|u| u.tokens.as_slice()).collect()
        } else {
            Vec::new()
        };
        let input = pack_sequence(&context, &request.utterance.tokens, self.vocab, self.encoder.config.max_len)?;
        Ok(Encoded::Tokens(self.encoder.encode(&input)?))
    }
}

/// Looks vectors up in an archive: `<dialogue_id>:<turn>` for the original
/// and `<dialogue_id>:<turn>:masked` for the masked utterance. Token records
/// are read as `[CLS] tokens… [SEP]`.
pub struct ArchiveProvider<'a> {
    pub archive: &'a EmbeddingArchive,
    pub tag: String,
}

impl ArchiveProvider<'_> {
    pub fn record_id(key: &UtteranceKey, masked: bool) -> String {
        if masked {
            format!("{key}:masked")
        } else {
            key.to_string()
        }
    }
}

impl EmbeddingProvider for ArchiveProvider<'_> {
    fn dim(&self) -> usize {
        self.archive.dim()
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn encode(&self, request: &EncodeRequest<'_>) -> Result<Encoded> {
        let id = Self::record_id(request.key, request.masked);
        match self.archive.record(&id) {
            None => Err(Error::NotFound(format!("archive record `{id}`"))),
            Some(ArchiveRecord::Sentence(v)) => Ok(Encoded::Sentence(v.clone())),
            Some(ArchiveRecord::Tokens(m)) => {
                let n = m.rows;
                let sources = (0..n)
                    .map(|p| {
                        if p == 0 || p + 1 == n {
                            TokenSource::Special
                        } else {
                            TokenSource::Token { utterance: 0, index: p - 1 }
                        }
                    })
                    .collect();
                Ok(Encoded::Tokens(SequenceEncoding {
                    vectors: m.clone(),
                    sources,
                }))
            }
        }
    }
}

/// Operands for one particle occurrence.
#[derive(Clone, Debug)]
pub struct LirInput<'a> {
    pub context: &'a [Utterance],
    pub utterance: &'a Utterance,
    pub masked: &'a Utterance,
    pub occurrence: &'a ParticleOccurrence,
}

fn encode_pair(provider: &dyn EmbeddingProvider, input: &LirInput<'_>) -> Result<(Encoded, Encoded)> {
    let key = &input.occurrence.key;
    let original = provider.encode(&EncodeRequest {
        key,
        masked: false,
        context: input.context,
        utterance: input.utterance,
    })?;
    let masked = provider.encode(&EncodeRequest {
        key,
        masked: true,
        context: input.context,
        utterance: input.masked,
    })?;
    if original.dim() != masked.dim() {
        return Err(Error::DimensionMismatch {
            context: format!("encodings of {key}"),
            expected: original.dim(),
            found: masked.dim(),
        });
    }
    Ok((original, masked))
}

pub fn subtract(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "representation difference".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

fn representation(provider: &dyn EmbeddingProvider, input: &LirInput<'_>, method: Method, vector: Vec<f64>) -> ParticleRepresentation {
    ParticleRepresentation {
        key: input.occurrence.key.clone(),
        particle: input.occurrence.particle.clone(),
        method,
        vector,
        model_tag: provider.tag().to_string(),
    }
}

/// `[CLS]` of the original minus `[CLS]` of the masked utterance.
pub fn lir_sentence(provider: &dyn EmbeddingProvider, input: &LirInput<'_>) -> Result<ParticleRepresentation> {
    let (v, v_masked) = encode_pair(provider, input)?;
    let r = subtract(v.sentence(), v_masked.sentence())?;
    Ok(representation(provider, input, Method::LirSentence, r))
}

/// Particle-position vector of the original minus the same position of the masked utterance.
pub fn lir_word(provider: &dyn EmbeddingProvider, input: &LirInput<'_>) -> Result<ParticleRepresentation> {
    let (v, v_masked) = encode_pair(provider, input)?;
    let pos = input.occurrence.token_position;
    let r = subtract(v.token(pos)?, v_masked.token(pos)?)?;
    Ok(representation(provider, input, Method::LirWord, r))
}

/// The particle-position vector itself.
pub fn naive_word(provider: &dyn EmbeddingProvider, input: &LirInput<'_>) -> Result<ParticleRepresentation> {
    let v = provider.encode(&EncodeRequest {
        key: &input.occurrence.key,
        masked: false,
        context: input.context,
        utterance: input.utterance,
    })?;
    let r = v.token(input.occurrence.token_position)?.to_vec();
    Ok(representation(provider, input, Method::NaiveWord, r))
}

pub fn represent(provider: &dyn EmbeddingProvider, input: &LirInput<'_>, method: Method) -> Result<ParticleRepresentation> {
    match method {
        Method::NaiveWord => naive_word(provider, input),
        Method::LirWord => lir_word(provider, input),
        Method::LirSentence => lir_sentence(provider, input),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LirManifest {
    pub provider: String,
    pub dim: usize,
    pub methods: Vec<Method>,
    /// Per method, representation count per particle.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// `(utterance key, particle)` for every window, in extraction order.
    pub records: Vec<(String, String)>,
}

/// Output ordered by window, then by `methods`.
pub fn extract_all(
    provider: &dyn EmbeddingProvider,
    windows: &[DialogueWindow],
    methods: &[Method],
    inventory: &ParticleInventory,
) -> Result<(Vec<ParticleRepresentation>, LirManifest)> {
    let results: Vec<Result<Vec<ParticleRepresentation>>> = windows
        .par_iter()
        .map(|w| {
            let masked = mask_particle(w.last(), &w.occurrence)?;
            let input = LirInput {
                context: &w.utterances[..2],
                utterance: w.last(),
                masked: &masked,
                occurrence: &w.occurrence,
            };
            methods.iter().map(|&m| represent(provider, &input, m)).collect()
        })
        .collect();
    let mut reps = Vec::with_capacity(windows.len() * methods.len());
    let mut failures = Vec::new();
    for (w, r) in windows.iter().zip(results) {
        match r {
            Ok(v) => reps.extend(v),
            Err(e) => failures.push(format!("{}: {e}", w.key())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "representation extraction failed for {} utterance(s): {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    let mut counts = BTreeMap::new();
    for m in methods {
        let per: BTreeMap<String, usize> = inventory
            .particles()
            .iter()
            .map(|p| (p.clone(), reps.iter().filter(|r| r.method == *m && &r.particle == p).count()))
            .collect();
        counts.insert(m.to_string(), per);
    }
    let manifest = LirManifest {
        provider: provider.tag().to_string(),
        dim: provider.dim(),
        methods: methods.to_vec(),
        counts,
        records: windows
            .iter()
            .map(|w| (w.key().to_string(), w.particle().to_string()))
            .collect(),
    };
    Ok((reps, manifest))
}

pub fn to_archive(reps: &[ParticleRepresentation], dim: usize, tag: &str) -> Result<EmbeddingArchive> {
    let mut archive = EmbeddingArchive::new(dim, Some(tag.to_string()))?;
    for r in reps {
        archive.insert(r.record_id(), ArchiveRecord::Sentence(r.vector.clone()))?;
    }
    Ok(archive)
}

/// Reads the representations of `method` back from an archive, using the
/// manifest for particle labels. Order follows the manifest.
pub fn from_archive(archive: &EmbeddingArchive, manifest: &LirManifest, method: Method) -> Result<Vec<ParticleRepresentation>> {
    manifest
        .records
        .iter()
        .map(|(key, particle)| {
            let id = format!("{key}:{method}");
            Ok(ParticleRepresentation {
                key: key.parse()?,
                particle: particle.clone(),
                method,
                vector: archive.fetch(&id, None)?.to_vec(),
                model_tag: manifest.provider.clone(),
            })
        })
        .collect()
}

/// Stacks representation vectors as rows.
pub fn to_matrix(reps: &[ParticleRepresentation]) -> Matrix {
    let dim = reps.first().map_or(0, |r| r.vector.len());
    Matrix::from_vec(reps.len(), dim, reps.iter().flat_map(|r| r.vector.iter().copied()).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::corpus::{detect_final_particle, extract_windows, Corpus};

    /// Returns a fixed token matrix per (utterance text, masked).
    struct FixedProvider {
        table: HashMap<(String, bool), Encoded>,
    }

    impl EmbeddingProvider for FixedProvider {
        fn dim(&self) -> usize {
            2
        }
        fn tag(&self) -> &str {
            "fixed"
        }
        fn encode(&self, r: &EncodeRequest<'_>) -> Result<Encoded> {
            self.table
                .get(&(r.utterance.text.clone(), r.masked))
                .cloned()
                .ok_or_else(|| Error::NotFound(r.utterance.text.clone()))
        }
    }

    fn tokens(rows: &[[f64; 2]]) -> Encoded {
        let n = rows.len();
        Encoded::Tokens(SequenceEncoding {
            vectors: Matrix::from_vec(n, 2, rows.iter().flatten().copied().collect()),
            sources: (0..n)
                .map(|p| {
                    if p == 0 || p + 1 == n {
                        TokenSource::Special
                    } else {
                        TokenSource::Token { utterance: 0, index: p - 1 }
                    }
                })
                .collect(),
        })
    }

    fn fixture() -> (Utterance, Utterance, ParticleOccurrence) {
        let u = Utterance::new("d", 2, "good lah");
        let occ = detect_final_particle(&u, &ParticleInventory::default()).unwrap();
        let m = mask_particle(&u, &occ).unwrap();
        (u, m, occ)
    }

    fn provider(orig: Encoded, masked: Encoded, u: &Utterance, m: &Utterance) -> FixedProvider {
        let mut table = HashMap::new();
        table.insert((u.text.clone(), false), orig);
        table.insert((m.text.clone(), true), masked);
        FixedProvider { table }
    }

    #[test]
    fn sentence_difference() {
        let (u, m, occ) = fixture();
        let p = provider(
            tokens(&[[1.0, 2.0], [0.0, 0.0], [9.0, 9.0], [0.0, 0.0]]),
            tokens(&[[0.0, 1.0], [0.0, 0.0], [5.0, 5.0], [0.0, 0.0]]),
            &u,
            &m,
        );
        let input = LirInput { context: &[], utterance: &u, masked: &m, occurrence: &occ };
        assert_eq!(lir_sentence(&p, &input).unwrap().vector, vec![1.0, 1.0]);

        let swapped = LirInput { utterance: &m, masked: &u, ..input.clone() };
        let p2 = provider(
            tokens(&[[0.0, 1.0], [0.0, 0.0], [5.0, 5.0], [0.0, 0.0]]),
            tokens(&[[1.0, 2.0], [0.0, 0.0], [9.0, 9.0], [0.0, 0.0]]),
            &m,
            &u,
        );
        assert_eq!(lir_sentence(&p2, &swapped).unwrap().vector, vec![-1.0, -1.0]);
    }

    #[test]
    fn word_difference_and_naive() {
        let (u, m, occ) = fixture();
        let p = provider(
            tokens(&[[0.0, 0.0], [7.0, 7.0], [3.0, 0.0], [0.0, 0.0]]),
            tokens(&[[0.0, 0.0], [7.0, 7.0], [1.0, 1.0], [0.0, 0.0]]),
            &u,
            &m,
        );
        let input = LirInput { context: &[], utterance: &u, masked: &m, occurrence: &occ };
        let w = lir_word(&p, &input).unwrap();
        assert_eq!(w.vector, vec![2.0, -1.0]);
        assert_eq!(w.method, Method::LirWord);
        assert_eq!(w.record_id(), "d:2:lir-word");
        assert_eq!(naive_word(&p, &input).unwrap().vector, vec![3.0, 0.0]);
    }

    #[test]
    fn identical_encodings_give_zero() {
        let (u, m, occ) = fixture();
        let e = tokens(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [0.0, 0.0]]);
        let p = provider(e.clone(), e, &u, &m);
        let input = LirInput { context: &[], utterance: &u, masked: &m, occurrence: &occ };
        assert_eq!(lir_word(&p, &input).unwrap().vector, vec![0.0, 0.0]);
        assert_eq!(lir_sentence(&p, &input).unwrap().vector, vec![0.0, 0.0]);
    }

    #[test]
    fn position_errors_and_sentence_only_providers() {
        let (u, m, mut occ) = fixture();
        let e = tokens(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [0.0, 0.0]]);
        let p = provider(e.clone(), e, &u, &m);
        occ.token_position = 7;
        let input = LirInput { context: &[], utterance: &u, masked: &m, occurrence: &occ };
        assert!(lir_word(&p, &input).is_err());

        let (u, m, occ) = fixture();
        let p = provider(Encoded::Sentence(vec![1.0, 1.0]), Encoded::Sentence(vec![0.0, 1.0]), &u, &m);
        let input = LirInput { context: &[], utterance: &u, masked: &m, occurrence: &occ };
        assert_eq!(lir_sentence(&p, &input).unwrap().vector, vec![1.0, 0.0]);
        assert!(matches!(lir_word(&p, &input), Err(Error::Unsupported(_))));

        let p = provider(Encoded::Sentence(vec![1.0, 1.0]), Encoded::Sentence(vec![0.0, 1.0, 2.0]), &u, &m);
        assert!(matches!(lir_sentence(&p, &input), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn extract_all_counts_and_archive_roundtrip() {
        let mut utts = Vec::new();
        for (d, p) in ["lah", "meh", "hor", "lah"].iter().enumerate() {
            for (t, s) in ["hi", "ok", &format!("go {p}")].iter().enumerate() {
                utts.push(Utterance::new(format!("d{d}"), t, *s));
            }
        }
        let inv = ParticleInventory::default();
        let windows = extract_windows(&Corpus::from_utterances(utts).unwrap(), &inv);

        let mut archive = EmbeddingArchive::new(2, None).unwrap();
        for w in &windows {
            let enc = [[0.5, 0.5], [1.0, 0.0], [w.key().turn as f64, 2.0], [0.0, 0.0]];
            let m = Matrix::from_vec(4, 2, enc.iter().flatten().copied().collect());
            archive.insert(ArchiveProvider::record_id(&w.key(), false), ArchiveRecord::Tokens(m.clone())).unwrap();
            let mut masked = m;
            masked.data[4] = 0.0;
            archive.insert(ArchiveProvider::record_id(&w.key(), true), ArchiveRecord::Tokens(masked)).unwrap();
        }
        let provider = ArchiveProvider { archive: &archive, tag: "arch".into() };
        let (reps, manifest) = extract_all(&provider, &windows, &[Method::LirWord, Method::NaiveWord], &inv).unwrap();
        assert_eq!(reps.len(), 8);
        assert_eq!(manifest.counts["lir-word"].values().sum::<usize>(), windows.len());
        assert_eq!(manifest.counts["lir-word"]["lah"], 2);
        assert_eq!(reps[0].vector, vec![2.0, 0.0]);

        let (none, _) = extract_all(&provider, &windows, &[], &inv).unwrap();
        assert!(none.is_empty());

        let archive_out = to_archive(&reps, 2, "arch").unwrap();
        let text = archive_out.to_text();
        let back = EmbeddingArchive::parse(&text).unwrap();
        let lir = from_archive(&back, &manifest, Method::LirWord).unwrap();
        assert_eq!(lir, reps.iter().filter(|r| r.method == Method::LirWord).cloned().collect::<Vec<_>>());
    }
}
