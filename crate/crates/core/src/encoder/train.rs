//! Cross-entropy training with plain mini-batch SGD, plus a finite-difference
//! gradient check.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::ClassifierHead;
use super::model::{Encoder, EncoderParams, SequenceEncoding};
use super::pack::PackedInput;
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input: PackedInput,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch (dropout active).
    pub epoch_losses: Vec<f64>,
}

/// Gradients for an encoder and its head.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub encoder: EncoderParams,
    pub head: Vec<Matrix>,
}

impl Gradients {
    fn zeros(encoder: &Encoder, head: &ClassifierHead) -> Self {
        Self {
            encoder: encoder.params.zeros_like(),
            head: head.zero_grads(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.encoder.tensors_mut().into_iter().zip(other.encoder.tensors()) {
            a.add_assign(b);
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            a.add_assign(b);
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.encoder.tensors();
        v.extend(self.head.iter());
        v
    }
}

/// Probabilities from the head applied to the `[CLS]` vector of `encoding`.
pub fn classify(
    encoder: &Encoder,
    head: &ClassifierHead,
    encoding: &SequenceEncoding,
    class_count: usize,
) -> Result<Vec<f64>> {
    if head.input_dim != encoder.dim() || encoding.dim() != encoder.dim() {
        return Err(Error::DimensionMismatch {
            context: "classifier head vs encoder".into(),
            expected: encoder.dim(),
            found: head.input_dim.min(encoding.dim()),
        });
    }
    if head.class_count() != class_count {
        return Err(Error::DimensionMismatch {
            context: "class count".into(),
            expected: class_count,
            found: head.class_count(),
        });
    }
    head.predict(encoding.cls())
}

pub fn predict(encoder: &Encoder, head: &ClassifierHead, input: &PackedInput) -> Result<Vec<f64>> {
    let enc = encoder.encode(input)?;
    classify(encoder, head, &enc, head.class_count())
}

/// Loss and gradients for one example. Dropout is active only when `rng` is given.
pub fn loss_and_gradients(
    encoder: &Encoder,
    head: &ClassifierHead,
    example: &TrainingExample,
    mut rng: Option<&mut rng::Rng>,
) -> Result<(f64, Gradients)> {
    if example.label >= head.class_count() {
        return Err(Error::InvalidArgument(format!(
            "label {} outside {} classes",
            example.label,
            head.class_count()
        )));
    }
    let (out, cache) = encoder.forward(&example.input, rng.as_deref_mut())?;
    let hc = head.forward(out.row(0), rng)?;
    let p = hc.probs[example.label];
    let loss = -p.max(f64::MIN_POSITIVE).ln();
    let mut d_logits = hc.probs.clone();
    d_logits[example.label] -= 1.0;

    let mut grads = Gradients::zeros(encoder, head);
    let d_cls = head.backward(&hc, &d_logits, &mut grads.head);
    let mut d_out = Matrix::zeros(out.rows, out.cols);
    d_out.row_mut(0).copy_from_slice(&d_cls);
    encoder.backward(&cache, &d_out, &mut grads.encoder);
    Ok((loss, grads))
}

/// Evaluation-mode loss together with the on/off state of every ReLU.
fn loss_and_pattern(encoder: &Encoder, head: &ClassifierHead, example: &TrainingExample) -> Result<(f64, Vec<bool>)> {
    let (out, cache) = encoder.forward(&example.input, None)?;
    let hc = head.forward(out.row(0), None)?;
    let pattern = cache.relu_pattern().chain(hc.relu_pattern()).collect();
    Ok((-hc.probs[example.label].max(f64::MIN_POSITIVE).ln(), pattern))
}

pub fn train(
    encoder: &mut Encoder,
    head: &mut ClassifierHead,
    data: &[TrainingExample],
    hp: &Hyperparameters,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if hp.batch_size == 0 || !(hp.learning_rate.is_finite() && hp.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= head.class_count()) {
        return Err(Error::InvalidArgument(format!("label {} outside the head's classes", bad.label)));
    }
    let dropout_seed = rng::derive(hp.seed, "dropout");
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng::keyed(hp.seed, &format!("epoch/{epoch}")));
        let mut total = 0.0;
        for (b, batch) in order.chunks(hp.batch_size).enumerate() {
            let (enc_ref, head_ref) = (&*encoder, &*head);
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = rng::seeded(rng::derive_index(dropout_seed, (epoch * data.len() + i) as u64));
                    loss_and_gradients(enc_ref, head_ref, &data[i], Some(&mut r))
                })
                .collect();
            let mut sum = Gradients::zeros(encoder, head);
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                sum.add(&g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b} is {batch_loss}"
                )));
            }
            total += batch_loss;
            let step = hp.learning_rate / batch.len() as f64;
            for (p, g) in encoder.params.tensors_mut().into_iter().zip(sum.encoder.tensors()) {
                p.data.iter_mut().zip(&g.data).for_each(|(w, d)| *w -= step * d);
            }
            for (p, g) in head.tensors_mut().into_iter().zip(&sum.head) {
                p.data.iter_mut().zip(&g.data).for_each(|(w, d)| *w -= step * d);
            }
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Evaluation-mode accuracy of the argmax prediction.
pub fn accuracy_on(encoder: &Encoder, head: &ClassifierHead, data: &[TrainingExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no examples to evaluate".into()));
    }
    let hits: Result<Vec<bool>> = data
        .par_iter()
        .map(|e| Ok(argmax(&predict(encoder, head, &e.input)?) == e.label))
        .collect();
    Ok(hits?.into_iter().filter(|&h| h).count() as f64 / data.len() as f64)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Denominator floor for relative errors of near-zero gradients.
const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central finite differences on a random
/// subset of weights (`per_tensor` entries from every tensor) and returns the
/// largest relative error `|a − n| / max(|a|, |n|, 1e-6)`. Dropout is off.
/// Probes whose perturbation switches any ReLU on or off are skipped, since
/// the central difference is not a derivative there. Embedding rows are sampled only among the ids and positions the example
/// actually uses.
pub fn gradient_check(
    encoder: &Encoder,
    head: &ClassifierHead,
    example: &TrainingExample,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, grads) = loss_and_gradients(encoder, head, example, None)?;
    let (_, base) = loss_and_pattern(encoder, head, example)?;
    let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut enc = encoder.clone();
    let mut hd = head.clone();
    let enc_tensors = enc.params.tensors().len();
    let mut rng = rng::keyed(seed, "gradient-check");
    let mut worst: f64 = 0.0;

    for t in 0..analytic.len() {
        let (rows, cols) = (analytic[t].rows, analytic[t].cols);
        let row_pool: Vec<usize> = match t {
            0 => example.input.ids.clone(),
            1 => (0..example.input.len()).collect(),
            2 => example.input.segments.clone(),
            _ => (0..rows).collect(),
        };
        for _ in 0..per_tensor {
            let r = row_pool[rng.gen_range(0..row_pool.len())];
            let idx = r * cols + rng.gen_range(0..cols);
            let perturb = |enc: &mut Encoder, hd: &mut ClassifierHead, delta: f64| {
                if t < enc_tensors {
                    enc.params.tensors_mut()[t].data[idx] += delta;
                } else {
                    hd.tensors_mut()[t - enc_tensors].data[idx] += delta;
                }
            };
            perturb(&mut enc, &mut hd, epsilon);
            let (plus, p_pattern) = loss_and_pattern(&enc, &hd, example)?;
            perturb(&mut enc, &mut hd, -2.0 * epsilon);
            let (minus, m_pattern) = loss_and_pattern(&enc, &hd, example)?;
            perturb(&mut enc, &mut hd, epsilon);
            if p_pattern != base || m_pattern != base {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[t].data[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::head::Activation;
    use crate::encoder::model::EncoderConfig;
    use crate::encoder::pack::TokenSource;

    fn tiny(seed: u64, layers: usize, final_norm: bool) -> (Encoder, ClassifierHead) {
        let enc = Encoder::new(EncoderConfig {
            vocab_size: 10,
            d_model: 8,
            layers,
            heads: 2,
            ffn_dim: 16,
            max_len: 12,
            dropout: 0.1,
            final_norm,
            seed,
        })
        .unwrap();
        let head = ClassifierHead::new(8, 8, vec!["a".into(), "b".into(), "c".into()], seed).unwrap();
        (enc, head)
    }

    fn example(seed: u64) -> TrainingExample {
        let mut r = rng::seeded(seed);
        let n = r.gen_range(3..10);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
        let split = n / 2;
        TrainingExample {
            input: PackedInput {
                segments: (0..n).map(|i| usize::from(i >= split)).collect(),
                sources: vec![TokenSource::Special; n],
                ids,
            },
            label: r.gen_range(0..3),
        }
    }

    #[test]
    fn gradient_check_small_model() {
        for seed in 0..10 {
            let (enc, head) = tiny(seed, 1, true);
            let err = gradient_check(&enc, &head, &example(seed), 1e-4, 3, seed).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_check_linear_config() {
        for seed in 0..5 {
            let (enc, mut head) = tiny(seed, 0, false);
            head.activation = Activation::Identity;
            let err = gradient_check(&enc, &head, &example(seed), 1e-4, 3, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_check_skips_relu_kinks() {
        // A dead first layer leaves the next pre-activations exactly at zero.
        let (enc, mut head) = tiny(4, 1, true);
        head.weights[0].data.iter_mut().for_each(|w| *w = 0.0);
        let err = gradient_check(&enc, &head, &example(4), 1e-5, 8, 4).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn gradient_check_rejects_zero_epsilon() {
        let (enc, head) = tiny(0, 1, true);
        assert!(gradient_check(&enc, &head, &example(0), 0.0, 1, 0).is_err());
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let (mut enc, mut head) = tiny(1, 1, true);
        let before = (enc.clone(), head.clone());
        let data: Vec<_> = (0..4).map(example).collect();
        let hp = Hyperparameters { epochs: 0, ..Hyperparameters::default() };
        train(&mut enc, &mut head, &data, &hp).unwrap();
        assert_eq!((enc, head), before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data: Vec<_> = (0..24).map(example).collect();
        let hp = Hyperparameters {
            learning_rate: 0.05,
            batch_size: 4,
            epochs: 30,
            seed: 9,
        };
        let (mut e1, mut h1) = tiny(2, 1, true);
        let (mut e2, mut h2) = tiny(2, 1, true);
        let r1 = train(&mut e1, &mut h1, &data, &hp).unwrap();
        let r2 = train(&mut e2, &mut h2, &data, &hp).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(h1, h2);
        assert_eq!(r1, r2);
        assert!(r1.epoch_losses.last().unwrap() < &r1.epoch_losses[0]);
    }

    #[test]
    fn classify_checks_dimensions() {
        let (enc, head) = tiny(0, 1, true);
        let e = enc.encode(&example(0).input).unwrap();
        let p = classify(&enc, &head, &e, 3).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(classify(&enc, &head, &e, 2).is_err());
        let wide = ClassifierHead::new(16, 8, vec!["a".into(), "b".into()], 0).unwrap();
        assert!(classify(&enc, &wide, &e, 2).is_err());
    }
}
