use std::collections::BTreeMap;

use discourse_core::corpus::{extract_windows, ParticleInventory, MASK_TOKEN};
use discourse_core::encoder::{build_vocabulary, Encoder, EncoderConfig};
use discourse_core::lir::{extract_all, subtract, Method, ReferenceProvider};
use discourse_core::synth::{dialogues, DialogueConfig};
use discourse_core::taskgen::{
    build_nsp_on_ppred_test, build_nsp_test, build_nsp_train, build_ppred, NspExample, NspLabel, TEST_CANDIDATES,
    TRAIN_CANDIDATES,
};
use proptest::prelude::*;

fn inventory() -> ParticleInventory {
    ParticleInventory::new(vec!["lah".into(), "meh".into(), "hor".into()]).unwrap()
}

fn groups(items: &[NspExample]) -> BTreeMap<&str, Vec<&NspExample>> {
    let mut g: BTreeMap<&str, Vec<&NspExample>> = BTreeMap::new();
    for e in items {
        g.entry(e.group_id.as_str()).or_default().push(e);
    }
    g
}

#[test]
fn candidate_ratios_on_the_synthetic_corpus() {
    let syn = dialogues(&DialogueConfig::default()).unwrap();
    let inv = inventory();
    let train = build_nsp_train(&syn.corpus, &inv, 1).unwrap();
    let test = build_nsp_test(&syn.corpus, &inv, 2).unwrap();
    for (set, size) in [(&train.items, TRAIN_CANDIDATES), (&test.items, TEST_CANDIDATES)] {
        let g = groups(set);
        assert!(!g.is_empty());
        for members in g.values() {
            assert_eq!(members.len(), size);
            assert_eq!(members.iter().filter(|e| e.label == NspLabel::Next).count(), 1);
        }
    }
    assert_eq!(TRAIN_CANDIDATES, 2);
    assert_eq!(TEST_CANDIDATES, 10);

    let positives: Vec<NspExample> = test.items.iter().filter(|e| e.label == NspLabel::Next).cloned().collect();
    let subs = build_nsp_on_ppred_test(&positives, &inv);
    assert!(!subs.items.is_empty());
    for s in &subs.items {
        assert_eq!(s.candidates.len(), 3);
        let gold = &s.candidates[s.gold];
        for (i, c) in s.candidates.iter().enumerate() {
            assert_eq!(c.tokens.len(), gold.tokens.len());
            let differing = c.tokens.iter().zip(&gold.tokens).filter(|(a, b)| a != b).count();
            assert_eq!(differing, usize::from(i != s.gold));
        }
    }
}

#[test]
fn negatives_split_evenly_between_related_and_random() {
    let syn = dialogues(&DialogueConfig {
        dialogues: 400,
        ..DialogueConfig::default()
    })
    .unwrap();
    let inv = inventory();
    let mut related = 0usize;
    let mut total = 0usize;
    for seed in 0..3 {
        for set in [build_nsp_train(&syn.corpus, &inv, seed).unwrap(), build_nsp_test(&syn.corpus, &inv, seed).unwrap()] {
            for e in set.items.iter().filter(|e| e.label != NspLabel::Next) {
                total += 1;
                related += usize::from(e.label == NspLabel::Related);
            }
        }
    }
    assert!(total >= 10_000, "only {total} draws");
    let sigma = (total as f64 * 0.25).sqrt();
    let dev = (related as f64 - total as f64 / 2.0).abs();
    assert!(dev <= 3.0 * sigma, "related {related} of {total}");
}

#[test]
fn ppred_is_balanced_and_masked() {
    let syn = dialogues(&DialogueConfig::default()).unwrap();
    let ex = build_ppred(&syn.corpus, &inventory(), 4).unwrap();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &ex {
        *counts.entry(e.gold.as_str()).or_default() += 1;
        assert_eq!(e.target.tokens.iter().filter(|t| *t == MASK_TOKEN).count(), 1);
    }
    let sizes: Vec<usize> = counts.values().copied().collect();
    assert_eq!(sizes.len(), 3);
    assert!(sizes.iter().all(|&s| s == sizes[0]));
}

#[test]
fn reference_lir_on_synthetic_windows() {
    let syn = dialogues(&DialogueConfig {
        dialogues: 12,
        ..DialogueConfig::default()
    })
    .unwrap();
    let inv = inventory();
    let windows = extract_windows(&syn.corpus, &inv);
    let vocab = build_vocabulary(&syn.corpus, 1).unwrap();
    let encoder = Encoder::new(EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_len: 64,
        dropout: 0.1,
        final_norm: true,
        seed: 3,
    })
    .unwrap();
    let provider = ReferenceProvider {
        encoder: &encoder,
        vocab: &vocab,
        tag: "untrained".into(),
        with_context: true,
    };
    let (reps, manifest) = extract_all(&provider, &windows, &Method::ALL, &inv).unwrap();
    assert_eq!(reps.len(), windows.len() * 3);
    assert!(reps.iter().all(|r| r.vector.len() == 8));
    for m in Method::ALL {
        assert_eq!(manifest.counts[&m.to_string()].values().sum::<usize>(), windows.len());
    }
    for chunk in reps.chunks(3) {
        let by = |m: Method| chunk.iter().find(|r| r.method == m).unwrap();
        assert_ne!(by(Method::NaiveWord).vector, by(Method::LirWord).vector);
    }
    let (again, _) = extract_all(&provider, &windows, &Method::ALL, &inv).unwrap();
    assert_eq!(reps, again);
}

proptest! {
    #[test]
    fn lir_difference_is_antisymmetric(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = subtract(&a, &b).unwrap();
        let ba = subtract(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert_eq!(*x, -*y);
        }
        prop_assert!(subtract(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        prop_assert!(subtract(&a, &b[1..]).is_err());
    }
}
