//! Pre-norm transformer encoder with hand-written backpropagation.
//!
//! `x₀ = tok[id] + pos[i] + seg[s]`, then per block
//! `x ← x + Attn(LN₁(x))`, `x ← x + W₂·relu(W₁·LN₂(x))`, and a final
//! layer norm. Everything is `f64`.

use serde::{Deserialize, Serialize};

use super::pack::{PackedInput, TokenSource};
use super::tensor::{dropout_mask, softmax_in_place, Matrix};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const LN_EPS: f64 = 1e-5;
pub const SEGMENTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Layer norm on the final output; disabling it (with zero layers and a
    /// linear head) gives a network that is linear in every single weight.
    #[serde(default = "default_true")]
    pub final_norm: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            max_len: 64,
            dropout: 0.1,
            final_norm: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Widths that mirror a BERT-base sized encoder.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 768,
            layers: 2,
            heads: 12,
            ffn_dim: 3072,
            max_len: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_len < 3 {
            return Err(Error::InvalidArgument(
                "vocab_size and ffn_dim must be positive and max_len at least 3".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim;
        let embed = (self.vocab_size + self.max_len + SEGMENTS) * d;
        let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        embed + self.layers * block + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl LayerParams {
    fn init(d: usize, f: usize, rng: &mut Rng) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        Self {
            ln1_g: Matrix::filled(1, d, 1.0),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::randn(d, d, sd, rng),
            bq: Matrix::zeros(1, d),
            wk: Matrix::randn(d, d, sd, rng),
            bk: Matrix::zeros(1, d),
            wv: Matrix::randn(d, d, sd, rng),
            bv: Matrix::zeros(1, d),
            wo: Matrix::randn(d, d, sd, rng),
            bo: Matrix::zeros(1, d),
            ln2_g: Matrix::filled(1, d, 1.0),
            ln2_b: Matrix::zeros(1, d),
            w1: Matrix::randn(d, f, sd, rng),
            b1: Matrix::zeros(1, f),
            w2: Matrix::randn(f, d, sf, rng),
            b2: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// All encoder weights. The same type doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tok: Matrix,
    pub pos: Matrix,
    pub seg: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
}

impl EncoderParams {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.tok, &self.pos, &self.seg];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.lnf_g);
        v.push(&self.lnf_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.tok, &mut self.pos, &mut self.seg];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["tok".to_string(), "pos".into(), "seg".into()];
        for i in 0..self.layers.len() {
            v.extend(LAYER_TENSORS.iter().map(|n| format!("layers.{i}.{n}")));
        }
        v.push("lnf_g".into());
        v.push("lnf_b".into());
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

/// Final-layer vectors for every packed position.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEncoding {
    pub vectors: Matrix,
    pub sources: Vec<TokenSource>,
}

impl SequenceEncoding {
    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }

    pub fn cls(&self) -> &[f64] {
        self.vectors.row(0)
    }

    pub fn position(&self, pos: usize) -> Option<&[f64]> {
        (pos < self.vectors.rows).then(|| self.vectors.row(pos))
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols;
    let mut y = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat.data[r * d + c] = h;
            y.data[r * d + c] = h * g.data[c] + b.data[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Matrix, cache: &LnCache, g: &Matrix, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dg.data[c] += dyr[c] * xh[c];
            db.data[c] += dyr[c];
            let dxh = dyr[c] * g.data[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let out = dx.row_mut(r);
        for c in 0..d {
            let dxh = dyr[c] * g.data[c];
            out[c] = cache.inv_std[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

fn apply_mask(m: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (x, k) in m.data.iter_mut().zip(mask) {
            *x *= k;
        }
    }
}

fn head_slice(m: &Matrix, h: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows, dh);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_slice(dst: &mut Matrix, src: &Matrix, h: usize, dh: usize) {
    for r in 0..src.rows {
        for (d, s) in dst.row_mut(r)[h * dh..(h + 1) * dh].iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_bias(b);
    y
}

/// Backward of `y = x·w + b`: accumulates parameter gradients, returns `dx`.
fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Matrix {
    x.add_tmatmul_into(dy, dw);
    dy.add_col_sums_into(db);
    dy.matmul_t(w)
}

struct LayerCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
    drop_attn: Option<Vec<f64>>,
    ln2: LnCache,
    b: Matrix,
    pre_relu: Matrix,
    relu: Matrix,
    drop_ffn: Option<Vec<f64>>,
}

pub(crate) struct ForwardCache {
    ids: Vec<usize>,
    segments: Vec<usize>,
    drop_emb: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: Option<LnCache>,
}

impl ForwardCache {
    /// On/off state of every feed-forward ReLU.
    pub(crate) fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().flat_map(|l| l.pre_relu.data.iter().map(|&z| z > 0.0))
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::keyed(config.seed, "encoder-init");
        let d = config.d_model;
        let params = EncoderParams {
            tok: Matrix::randn(config.vocab_size, d, 0.5, &mut rng),
            pos: Matrix::randn(config.max_len, d, 0.1, &mut rng),
            seg: Matrix::randn(SEGMENTS, d, 0.1, &mut rng),
            layers: (0..config.layers)
                .map(|_| LayerParams::init(d, config.ffn_dim, &mut rng))
                .collect(),
            lnf_g: Matrix::filled(1, d, 1.0),
            lnf_b: Matrix::zeros(1, d),
        };
        Ok(Self { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn parameter_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &PackedInput) -> Result<()> {
        if input.is_empty() {
            return Err(Error::InvalidArgument("empty input sequence".into()));
        }
        if input.len() > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "input of {} positions exceeds the maximum length {}",
                input.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside the vocabulary")));
        }
        if input.segments.iter().any(|&s| s >= SEGMENTS) {
            return Err(Error::InvalidArgument("segment id out of range".into()));
        }
        Ok(())
    }

    /// Evaluation-mode encoding (dropout disabled).
    pub fn encode(&self, input: &PackedInput) -> Result<SequenceEncoding> {
        let (vectors, _) = self.forward(input, None)?;
        Ok(SequenceEncoding {
            vectors,
            sources: input.sources.clone(),
        })
    }

    /// Runs the encoder. Dropout is applied only when `rng` is given.
    pub(crate) fn forward(&self, input: &PackedInput, mut rng: Option<&mut Rng>) -> Result<(Matrix, ForwardCache)> {
        self.check_input(input)?;
        let cfg = &self.config;
        let (n, d) = (input.len(), cfg.d_model);
        let p = &self.params;
        let rate = cfg.dropout;
        let mut mask = |len: usize| -> Option<Vec<f64>> {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(len, rate, r)),
                _ => None,
            }
        };

        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let row = x.row_mut(i);
            for ((o, t), (ps, s)) in row
                .iter_mut()
                .zip(p.tok.row(input.ids[i]))
                .zip(p.pos.row(i).iter().zip(p.seg.row(input.segments[i])))
            {
                *o = t + ps + s;
            }
        }
        let drop_emb = mask(n * d);
        apply_mask(&mut x, &drop_emb);

        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = linear(&a, &lp.wq, &lp.bq);
            let k = linear(&a, &lp.wk, &lp.bk);
            let v = linear(&a, &lp.wv, &lp.bv);
            let mut concat = Matrix::zeros(n, d);
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = head_slice(&q, h, dh);
                let kh = head_slice(&k, h, dh);
                let vh = head_slice(&v, h, dh);
                let mut s = qh.matmul_t(&kh);
                s.scale(scale);
                for r in 0..n {
                    softmax_in_place(s.row_mut(r));
                }
                let o = s.matmul(&vh);
                add_head_slice(&mut concat, &o, h, dh);
                probs.push(s);
            }
            let mut attn = linear(&concat, &lp.wo, &lp.bo);
            let drop_attn = mask(n * d);
            apply_mask(&mut attn, &drop_attn);
            x.add_assign(&attn);

            let (b, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            let pre_relu = linear(&b, &lp.w1, &lp.b1);
            let mut relu = pre_relu.clone();
            relu.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut ffn = linear(&relu, &lp.w2, &lp.b2);
            let drop_ffn = mask(n * d);
            apply_mask(&mut ffn, &drop_ffn);
            x.add_assign(&ffn);

            caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                concat,
                drop_attn,
                ln2,
                b,
                pre_relu,
                relu,
                drop_ffn,
            });
        }
        let (out, lnf) = if cfg.final_norm {
            let (out, c) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
            (out, Some(c))
        } else {
            (x, None)
        };
        Ok((
            out,
            ForwardCache {
                ids: input.ids.clone(),
                segments: input.segments.clone(),
                drop_emb,
                layers: caches,
                lnf,
            },
        ))
    }

    /// Accumulates into `grads` the gradient of the loss given `d_out`, the
    /// gradient with respect to the final-layer output.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: &Matrix, grads: &mut EncoderParams) {
        let p = &self.params;
        let cfg = &self.config;
        let n = d_out.rows;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = match &cache.lnf {
            Some(c) => layer_norm_backward(d_out, c, &p.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b),
            None => d_out.clone(),
        };

        for (li, (lp, lc)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
            let g = &mut grads.layers[li];

            // x_out = x_mid + drop(relu(b·w1 + b1)·w2 + b2)
            let mut d_ffn = dx.clone();
            apply_mask(&mut d_ffn, &lc.drop_ffn);
            let mut d_relu = linear_backward(&lc.relu, &lp.w2, &d_ffn, &mut g.w2, &mut g.b2);
            for (dv, &z) in d_relu.data.iter_mut().zip(&lc.pre_relu.data) {
                if z <= 0.0 {
                    *dv = 0.0;
                }
            }
            let d_b = linear_backward(&lc.b, &lp.w1, &d_relu, &mut g.w1, &mut g.b1);
            let d_mid = layer_norm_backward(&d_b, &lc.ln2, &lp.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
            dx.add_assign(&d_mid);

            // x_mid = x_in + drop(concat·wo + bo)
            let mut d_attn = dx.clone();
            apply_mask(&mut d_attn, &lc.drop_attn);
            let d_concat = linear_backward(&lc.concat, &lp.wo, &d_attn, &mut g.wo, &mut g.bo);
            let mut dq = Matrix::zeros(n, d);
            let mut dk = Matrix::zeros(n, d);
            let mut dv = Matrix::zeros(n, d);
            for h in 0..heads {
                let probs = &lc.probs[h];
                let qh = head_slice(&lc.q, h, dh);
                let kh = head_slice(&lc.k, h, dh);
                let vh = head_slice(&lc.v, h, dh);
                let d_oh = head_slice(&d_concat, h, dh);
                // o = P·v
                let mut d_vh = Matrix::zeros(n, dh);
                probs.add_tmatmul_into(&d_oh, &mut d_vh);
                let d_p = d_oh.matmul_t(&vh);
                let mut d_s = Matrix::zeros(n, n);
                for r in 0..n {
                    let pr = probs.row(r);
                    let dpr = d_p.row(r);
                    let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for (o, (pv, dpv)) in d_s.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                        *o = pv * (dpv - inner) * scale;
                    }
                }
                let d_qh = d_s.matmul(&kh);
                let mut d_kh = Matrix::zeros(n, dh);
                d_s.add_tmatmul_into(&qh, &mut d_kh);
                add_head_slice(&mut dq, &d_qh, h, dh);
                add_head_slice(&mut dk, &d_kh, h, dh);
                add_head_slice(&mut dv, &d_vh, h, dh);
            }
            let mut d_a = linear_backward(&lc.a, &lp.wq, &dq, &mut g.wq, &mut g.bq);
            d_a.add_assign(&linear_backward(&lc.a, &lp.wk, &dk, &mut g.wk, &mut g.bk));
            d_a.add_assign(&linear_backward(&lc.a, &lp.wv, &dv, &mut g.wv, &mut g.bv));
            let d_in = layer_norm_backward(&d_a, &lc.ln1, &lp.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
            dx.add_assign(&d_in);
        }

        apply_mask(&mut dx, &cache.drop_emb);
        for i in 0..n {
            let row = dx.row(i);
            for (dst, s) in [
                (&mut grads.tok, cache.ids[i]),
                (&mut grads.pos, i),
                (&mut grads.seg, cache.segments[i]),
            ] {
                for (o, v) in dst.row_mut(s).iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::vocab::{CLS_ID, SEP_ID};

    fn input(ids: Vec<usize>) -> PackedInput {
        let n = ids.len();
        PackedInput {
            ids,
            segments: vec![0; n],
            sources: vec![TokenSource::Special; n],
        }
    }

    fn tiny() -> Encoder {
        Encoder::new(EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_len: 10,
            dropout: 0.1,
            final_norm: true,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn eval_encoding_is_deterministic() {
        let enc = tiny();
        let x = input(vec![CLS_ID, 7, 8, SEP_ID]);
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a.dim(), 8);
    }

    #[test]
    fn over_length_input_is_rejected() {
        let enc = tiny();
        assert!(enc.encode(&input(vec![5; 11])).is_err());
        assert!(enc.encode(&input(vec![99])).is_err());
    }

    #[test]
    fn parameter_count_matches_config() {
        let enc = tiny();
        assert_eq!(enc.parameter_count(), enc.config.parameter_count());
        assert_eq!(enc.params.names().len(), enc.params.tensors().len());
        let again = Encoder::new(enc.config.clone()).unwrap();
        assert_eq!(again, enc);
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            vocab_size: 10,
            d_model: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(bad).is_err());
    }

    #[test]
    fn training_mode_dropout_changes_output() {
        let enc = tiny();
        let x = input(vec![CLS_ID, 7, 8, SEP_ID]);
        let mut rng = rng::seeded(1);
        let (train_out, _) = enc.forward(&x, Some(&mut rng)).unwrap();
        let eval = enc.encode(&x).unwrap();
        assert_ne!(train_out, eval.vectors);
    }
}
