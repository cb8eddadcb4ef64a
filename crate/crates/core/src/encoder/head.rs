use serde::{Deserialize, Serialize};

use super::tensor::{dropout_mask, softmax_in_place, Matrix};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const HIDDEN_LAYERS: usize = 3;
pub const HEAD_DROPOUT: f64 = 0.2;
pub const BERT_BASE_HIDDEN: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Linear head; only useful for gradient checking.
    Identity,
}

/// Three hidden fully-connected layers followed by a softmax output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub labels: Vec<String>,
    pub input_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub dropout: f64,
    /// `HIDDEN_LAYERS + 1` weight/bias pairs, input side first.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

pub(crate) struct HeadCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
    pub(crate) probs: Vec<f64>,
}

impl HeadCache {
    pub(crate) fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().flat_map(|z| z.data.iter().map(|&v| v > 0.0))
    }
}

impl ClassifierHead {
    pub fn new(input_dim: usize, hidden: usize, labels: Vec<String>, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || labels.len() < 2 {
            return Err(Error::InvalidArgument(
                "classifier head needs positive widths and at least two classes".into(),
            ));
        }
        let mut rng = rng::keyed(seed, "head-init");
        let mut weights = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut biases = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut fan_in = input_dim;
        for layer in 0..=HIDDEN_LAYERS {
            let out = if layer == HIDDEN_LAYERS { labels.len() } else { hidden };
            // He initialisation for the ReLU stack.
            weights.push(Matrix::randn(fan_in, out, (2.0 / fan_in as f64).sqrt(), &mut rng));
            biases.push(Matrix::zeros(1, out));
            fan_in = hidden;
        }
        Ok(Self {
            labels,
            input_dim,
            hidden,
            activation: Activation::Relu,
            dropout: HEAD_DROPOUT,
            weights,
            biases,
        })
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    /// Zeroes the output layer so every prediction is uniform.
    pub fn zero_output(&mut self) {
        for m in [&mut self.weights[HIDDEN_LAYERS], &mut self.biases[HIDDEN_LAYERS]] {
            m.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        (0..=HIDDEN_LAYERS)
            .flat_map(|i| [format!("head.w{i}"), format!("head.b{i}")])
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.tensors().iter().map(|t| t.zeros_like()).collect()
    }

    pub(crate) fn forward(&self, x: &[f64], mut rng: Option<&mut Rng>) -> Result<HeadCache> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "classifier head input".into(),
                expected: self.input_dim,
                found: x.len(),
            });
        }
        let mut h = Matrix::from_vec(1, x.len(), x.to_vec());
        let mut inputs = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut pre = Vec::with_capacity(HIDDEN_LAYERS);
        let mut masks = Vec::with_capacity(HIDDEN_LAYERS);
        for layer in 0..HIDDEN_LAYERS {
            let mut z = h.matmul(&self.weights[layer]);
            z.add_row_bias(&self.biases[layer]);
            let mut a = z.clone();
            if self.activation == Activation::Relu {
                a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => Some(dropout_mask(a.len(), self.dropout, r)),
                _ => None,
            };
            if let Some(m) = &mask {
                a.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            inputs.push(h);
            pre.push(z);
            masks.push(mask);
            h = a;
        }
        let mut logits = h.matmul(&self.weights[HIDDEN_LAYERS]);
        logits.add_row_bias(&self.biases[HIDDEN_LAYERS]);
        inputs.push(h);
        let mut probs = logits.data;
        softmax_in_place(&mut probs);
        Ok(HeadCache {
            inputs,
            pre,
            masks,
            probs,
        })
    }

    /// Given `d_logits`, accumulates parameter gradients (ordered like
    /// [`tensors`](Self::tensors)) and returns the input gradient.
    pub(crate) fn backward(&self, cache: &HeadCache, d_logits: &[f64], grads: &mut [Matrix]) -> Vec<f64> {
        let mut dy = Matrix::from_vec(1, d_logits.len(), d_logits.to_vec());
        for layer in (0..=HIDDEN_LAYERS).rev() {
            let x = &cache.inputs[layer];
            let (gw, gb) = grads[2 * layer..2 * layer + 2].split_at_mut(1);
            x.add_tmatmul_into(&dy, &mut gw[0]);
            dy.add_col_sums_into(&mut gb[0]);
            let mut dx = dy.matmul_t(&self.weights[layer]);
            if layer > 0 {
                let below = layer - 1;
                if let Some(m) = &cache.masks[below] {
                    dx.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
                if self.activation == Activation::Relu {
                    for (v, &z) in dx.data.iter_mut().zip(&cache.pre[below].data) {
                        if z <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            dy = dx;
        }
        dy.data
    }

    /// Evaluation-mode class probabilities.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, None)?.probs)
    }
}
