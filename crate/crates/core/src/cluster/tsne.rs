//! Exact t-SNE: all-pairs affinities and gradients.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::tensor::Matrix;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.perplexity > 0.0) || self.perplexity >= n as f64 {
            return Err(Error::InvalidArgument(format!(
                "perplexity {} must be positive and below the point count {n}",
                self.perplexity
            )));
        }
        if self.iterations < self.exaggeration_iterations {
            return Err(Error::InvalidArgument(format!(
                "iterations {} shorter than the exaggeration phase {}",
                self.iterations, self.exaggeration_iterations
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn squared_distances(x: &Matrix) -> Matrix {
    let n = x.rows;
    let mut d = Matrix::zeros(n, n);
    d.data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    d
}

fn distinct_points(x: &Matrix) -> usize {
    let mut rows: Vec<&[f64]> = (0..x.rows).map(|i| x.row(i)).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup();
    rows.len()
}

/// Row `i` of the conditional distribution `p_{j|i}` with a Gaussian kernel
/// whose precision is found by bisection so that `exp(H)` hits `perplexity`.
fn conditional_row(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let min_d = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    let mut p = vec![0.0; dist.len()];
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, &d) in dist.iter().enumerate() {
            if j == i {
                p[j] = 0.0;
                continue;
            }
            let shifted = d - min_d;
            let v = (-beta * shifted).exp();
            p[j] = v;
            sum += v;
            weighted += shifted * v;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        for v in &mut p {
            *v /= sum;
        }
        let diff = entropy - target;
        if diff.abs() < 1e-12 || beta > 1e200 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// The per-row conditional distributions `p_{j|i}` (rows sum to one).
pub fn conditional_affinities(x: &Matrix, perplexity: f64) -> Result<Matrix> {
    let n = x.rows;
    if n < 3 || distinct_points(x) < 3 {
        return Err(Error::Degenerate(format!(
            "t-SNE needs at least 3 distinct points, got {} of {n}",
            distinct_points(x)
        )));
    }
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {perplexity} must be positive and below the point count {n}"
        )));
    }
    let d = squared_distances(x);
    let mut p = Matrix::zeros(n, n);
    p.data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        row.copy_from_slice(&conditional_row(d.row(i), i, perplexity));
    });
    Ok(p)
}

/// Symmetric joint affinities `(P + Pᵀ) / 2n`, summing to one.
pub fn pairwise_affinities(x: &Matrix, perplexity: f64) -> Result<Matrix> {
    let c = conditional_affinities(x, perplexity)?;
    let n = x.rows;
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p.data[i * n + j] = (c.at(i, j) + c.at(j, i)) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Student-t numerators `1 / (1 + |y_i − y_j|²)` (zero diagonal) and their sum.
fn student_t(y: &Matrix) -> (Matrix, f64) {
    let n = y.rows;
    let mut num = squared_distances(y);
    num.data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 0.0 } else { 1.0 / (1.0 + *v) };
        }
    });
    let z = num.data.iter().sum();
    (num, z)
}

/// `KL(P ‖ Q)` for embedding `y`.
pub fn kl_divergence(p: &Matrix, y: &Matrix) -> f64 {
    let (num, z) = student_t(y);
    p.data
        .iter()
        .zip(&num.data)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(1 + |y_i − y_j|²)⁻¹ (y_i − y_j)`.
pub fn kl_gradient(p: &Matrix, y: &Matrix) -> Matrix {
    let (num, z) = student_t(y);
    let (n, dims) = (y.rows, y.cols);
    let mut grad = Matrix::zeros(n, dims);
    grad.data.par_chunks_mut(dims).enumerate().for_each(|(i, g)| {
        let yi = y.row(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let nij = num.at(i, j);
            let coeff = 4.0 * (p.at(i, j) - nij / z) * nij;
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += coeff * (yi[k] - y.at(j, k));
            }
        }
    });
    grad
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneOutput {
    pub points: Matrix,
    /// Objective right after the exaggeration phase, with the true `P`.
    pub kl_after_exaggeration: f64,
    pub kl_final: f64,
}

/// Embeds rows of `x` in 2D.
pub fn tsne_embed(x: &Matrix, config: &TsneConfig) -> Result<TsneOutput> {
    config.validate(x.rows)?;
    let p = pairwise_affinities(x, config.perplexity)?;
    let n = x.rows;
    let mut r = rng::keyed(config.seed, "tsne-init");
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Matrix::from_vec(n, 2, (0..n * 2).map(|_| normal.sample(&mut r)).collect());
    let mut velocity = Matrix::zeros(n, 2);
    let mut gains = Matrix::filled(n, 2, 1.0);
    let mut p_exag = p.clone();
    p_exag.scale(config.exaggeration);

    let mut kl_after = kl_divergence(&p, &y);
    for it in 0..config.iterations {
        let exaggerating = it < config.exaggeration_iterations;
        let momentum = if exaggerating {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let grad = kl_gradient(if exaggerating { &p_exag } else { &p }, &y);
        for k in 0..y.data.len() {
            let g = grad.data[k];
            gains.data[k] = if (g > 0.0) != (velocity.data[k] > 0.0) {
                gains.data[k] + 0.2
            } else {
                (gains.data[k] * 0.8).max(0.01)
            };
            velocity.data[k] = momentum * velocity.data[k] - config.learning_rate * gains.data[k] * g;
            y.data[k] += velocity.data[k];
        }
        if it + 1 == config.exaggeration_iterations {
            kl_after = kl_divergence(&p, &y);
        }
        if (it + 1) % 50 == 0 && !y.all_finite() {
            return Err(Error::NonFinite(format!("t-SNE coordinates at iteration {}", it + 1)));
        }
    }
    let kl_final = kl_divergence(&p, &y);
    if !kl_final.is_finite() || !y.all_finite() {
        return Err(Error::NonFinite("t-SNE objective".into()));
    }
    Ok(TsneOutput {
        points: y,
        kl_after_exaggeration: kl_after,
        kl_final,
    })
}
