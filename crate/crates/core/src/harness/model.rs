//! A tiny decoder-only transformer with hand-written reverse mode.
//!
//! Pre-norm blocks (parameter-free RMSNorm), single-head causal attention,
//! a GELU feed-forward, fixed sinusoidal positions and an output head tied to
//! the token embedding. Every parameter is a 2-D matrix and is exposed as a
//! named tunable layer:
//!
//! | index        | name                    | shape        |
//! |--------------|-------------------------|--------------|
//! | 0            | `embed`                 | vocab x d    |
//! | 1 + 6b + 0   | `blocks.{b}.attn.query` | d x d        |
//! | 1 + 6b + 1   | `blocks.{b}.attn.key`   | d x d        |
//! | 1 + 6b + 2   | `blocks.{b}.attn.value` | d x d        |
//! | 1 + 6b + 3   | `blocks.{b}.attn.output`| d x d        |
//! | 1 + 6b + 4   | `blocks.{b}.ffn.up`     | ffn x d      |
//! | 1 + 6b + 5   | `blocks.{b}.ffn.down`   | d x ffn      |
//!
//! Identifier tokens are scored level by level: the distribution for level
//! `l` is a softmax over that level's alphabet only.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::ItemId;
use super::vocab::Vocab;
use crate::error::{GemsError, Result};
use crate::gems::TunableModel;
use crate::linalg::{dot, Matrix};
use crate::rng::StreamRng;

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub ffn_width: usize,
    pub ctx_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_blocks: 2,
            ffn_width: 128,
            ctx_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return Err(GemsError::Config("d_model must be even and >= 2".into()));
        }
        if self.n_blocks == 0 || self.ffn_width == 0 || self.ctx_len < 4 {
            return Err(GemsError::Config("n_blocks, ffn_width must be positive and ctx_len >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

const SLOTS: [Slot; 6] = [Slot::Query, Slot::Key, Slot::Value, Slot::Output, Slot::Up, Slot::Down];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    vocab: Vocab,
    weights: Vec<Matrix>,
    names: Vec<String>,
    positions: Matrix,
}

/// Per-block activations kept for the backward pass.
struct BlockCache {
    x_in: Vec<f64>,
    a: Vec<f64>,
    r1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    h: Vec<f64>,
    x_mid: Vec<f64>,
    a2: Vec<f64>,
    r2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct ForwardCache {
    len: usize,
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
    af: Vec<f64>,
    rf: Vec<f64>,
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    /// Normalized final hidden state of the last token fed in.
    last_hidden: Vec<f64>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-layer inputs at the final token position, indexed like the weights.
pub type LayerInputs = Vec<Vec<f64>>;

impl ToyModel {
    /// Random initialization from the given stream.
    pub fn new(config: ModelConfig, vocab: Vocab, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let mut m = ToyModel::zeros(config, vocab)?;
        let d = config.d_model as f64;
        let f = config.ffn_width as f64;
        let depth = (2.0 * config.n_blocks as f64).sqrt();
        let mut fill = |w: &mut Matrix, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            w.as_mut_slice().iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(&mut m.weights[0], 1.0);
        for b in 0..config.n_blocks {
            for (s, slot) in SLOTS.iter().enumerate() {
                let std = match slot {
                    Slot::Query | Slot::Key | Slot::Value | Slot::Up => 1.0 / d.sqrt(),
                    Slot::Output => 1.0 / d.sqrt() / depth,
                    Slot::Down => 1.0 / f.sqrt() / depth,
                };
                fill(&mut m.weights[1 + 6 * b + s], std);
            }
        }
        Ok(m)
    }

    /// All-zero weights. The zero embedding makes every identifier level uniform.
    pub fn zeros(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width;
        let mut weights = vec![Matrix::zeros(vocab.size(), d)];
        let mut names = vec!["embed".to_string()];
        for b in 0..config.n_blocks {
            for slot in SLOTS {
                let (shape, name) = match slot {
                    Slot::Query => ((d, d), "attn.query"),
                    Slot::Key => ((d, d), "attn.key"),
                    Slot::Value => ((d, d), "attn.value"),
                    Slot::Output => ((d, d), "attn.output"),
                    Slot::Up => ((f, d), "ffn.up"),
                    Slot::Down => ((d, f), "ffn.down"),
                };
                weights.push(Matrix::zeros(shape.0, shape.1));
                names.push(format!("blocks.{b}.{name}"));
            }
        }
        let positions = Matrix::from_fn(config.ctx_len, d, |i, j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = i as f64 * freq;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        Ok(ToyModel {
            config,
            vocab,
            weights,
            names,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }
    pub fn layer_names(&self) -> &[String] {
        &self.names
    }
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Replaces every weight, checking shapes.
    pub fn set_weights(&mut self, weights: Vec<Matrix>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(GemsError::InvalidArgument(format!(
                "expected {} weight matrices, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        for (i, (w, cur)) in weights.iter().zip(&self.weights).enumerate() {
            if w.shape() != cur.shape() {
                return Err(GemsError::shape(self.names[i].clone(), cur.shape(), w.shape()));
            }
        }
        self.weights = weights;
        Ok(())
    }

    #[inline]
    fn w(&self, block: usize, slot: Slot) -> &Matrix {
        &self.weights[1 + 6 * block + slot as usize]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(GemsError::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.ctx_len {
            return Err(GemsError::InvalidArgument(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.ctx_len
            )));
        }
        let v = self.vocab.size() as u32;
        if let Some(t) = tokens.iter().find(|&&t| t >= v) {
            return Err(GemsError::InvalidArgument(format!("token {t} outside vocabulary of {v}")));
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &[u32], start: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = vec![0.0; tokens.len() * d];
        for (i, &t) in tokens.iter().enumerate() {
            let e = self.weights[0].row(t as usize);
            let p = self.positions.row(start + i);
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        x
    }

    fn forward(&self, tokens: &[u32]) -> ForwardCache {
        let d = self.config.d_model;
        let fw = self.config.ffn_width;
        let l = tokens.len();
        let mut x = self.embed_tokens(tokens, 0);
        let scale = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for b in 0..self.config.n_blocks {
            let x_in = x.clone();
            let (a, r1) = rms_norm(&x, d);
            let q = linear(&a, d, self.w(b, Slot::Query));
            let k = linear(&a, d, self.w(b, Slot::Key));
            let v = linear(&a, d, self.w(b, Slot::Value));
            let mut p = vec![0.0; l * l];
            let mut h = vec![0.0; l * d];
            for i in 0..l {
                let qi = &q[i * d..(i + 1) * d];
                let row = &mut p[i * l..i * l + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                }
                softmax_in_place(row);
                let hi = &mut h[i * d..(i + 1) * d];
                for (j, &pij) in row.iter().enumerate() {
                    axpy(hi, pij, &v[j * d..(j + 1) * d]);
                }
            }
            let o = linear(&h, d, self.w(b, Slot::Output));
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let x_mid = x.clone();
            let (a2, r2) = rms_norm(&x, d);
            let u = linear(&a2, d, self.w(b, Slot::Up));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let dn = linear(&g, fw, self.w(b, Slot::Down));
            for (xi, di) in x.iter_mut().zip(&dn) {
                *xi += di;
            }
            blocks.push(BlockCache {
                x_in,
                a,
                r1,
                q,
                k,
                v,
                p,
                h,
                x_mid,
                a2,
                r2,
                u,
                g,
            });
        }
        let (af, rf) = rms_norm(&x, d);
        ForwardCache {
            len: l,
            blocks,
            x_final: x,
            af,
            rf,
        }
    }

    /// Log-probabilities over the level's alphabet given a normalized hidden state.
    pub fn level_log_probs(&self, hidden: &[f64], level: usize) -> Vec<f64> {
        let mut logits = self.level_logits(hidden, level);
        log_softmax_in_place(&mut logits);
        logits
    }

    fn level_logits(&self, hidden: &[f64], level: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let off = self.vocab.level_offset(level);
        let scale = 1.0 / (d as f64).sqrt();
        (0..self.vocab.alphabet)
            .map(|s| dot(hidden, self.weights[0].row(off + s)) * scale)
            .collect()
    }

    fn teacher_forced(&self, prompt: &[u32], target: &ItemId) -> Result<Vec<u32>> {
        if target.len() != self.vocab.id_levels {
            return Err(GemsError::InvalidArgument(format!(
                "target has {} levels, vocabulary has {}",
                target.len(),
                self.vocab.id_levels
            )));
        }
        let mut seq = prompt.to_vec();
        let toks = self.vocab.item_tokens(target);
        seq.extend_from_slice(&toks[..toks.len() - 1]);
        self.check_tokens(&seq)?;
        Ok(seq)
    }

    /// `-sum_t log P(target_t | target_<t, prompt)`.
    pub fn nll(&self, prompt: &[u32], target: &ItemId) -> Result<f64> {
        let seq = self.teacher_forced(prompt, target)?;
        let cache = self.forward(&seq);
        let d = self.config.d_model;
        let p = prompt.len();
        let mut loss = 0.0;
        for (t, &s) in target.symbols().iter().enumerate() {
            let pos = p - 1 + t;
            let lp = self.level_log_probs(&cache.af[pos * d..(pos + 1) * d], t);
            loss -= lp[s as usize];
        }
        Ok(loss)
    }

    /// Loss plus gradients for one example, accumulated into `grads`.
    pub fn nll_backward(&self, prompt: &[u32], target: &ItemId, grads: &mut [Matrix]) -> Result<f64> {
        if grads.len() != self.weights.len() {
            return Err(GemsError::InvalidArgument("gradient buffer has wrong layer count".into()));
        }
        let seq = self.teacher_forced(prompt, target)?;
        let c = self.forward(&seq);
        let d = self.config.d_model;
        let fw = self.config.ffn_width;
        let l = c.len;
        let scale = 1.0 / (d as f64).sqrt();
        let p = prompt.len();

        // head
        let mut daf = vec![0.0; l * d];
        let mut loss = 0.0;
        for (t, &s) in target.symbols().iter().enumerate() {
            let pos = p - 1 + t;
            let hidden = &c.af[pos * d..(pos + 1) * d];
            let mut probs = self.level_logits(hidden, t);
            log_softmax_in_place(&mut probs);
            loss -= probs[s as usize];
            probs.iter_mut().for_each(|z| *z = z.exp());
            probs[s as usize] -= 1.0;
            let off = self.vocab.level_offset(t);
            let dh = &mut daf[pos * d..(pos + 1) * d];
            for (sym, &dl) in probs.iter().enumerate() {
                let coef = dl * scale;
                axpy(dh, coef, self.weights[0].row(off + sym));
                axpy(grads[0].row_mut(off + sym), coef, hidden);
            }
        }
        let mut dx = rms_norm_backward(&daf, &c.af, &c.rf, d);
        let _ = &c.x_final;

        for b in (0..self.config.n_blocks).rev() {
            let bc = &c.blocks[b];
            let base = 1 + 6 * b;
            // feed-forward
            let (dg, _) = {
                let (dg, dw) = linear_backward(&dx, &bc.g, fw, d, self.w(b, Slot::Down));
                accumulate(&mut grads[base + Slot::Down as usize], &dw);
                (dg, ())
            };
            let du: Vec<f64> = dg.iter().zip(&bc.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let (da2, dw_up) = linear_backward(&du, &bc.a2, d, fw, self.w(b, Slot::Up));
            accumulate(&mut grads[base + Slot::Up as usize], &dw_up);
            let dmid = rms_norm_backward(&da2, &bc.a2, &bc.r2, d);
            for (x, y) in dx.iter_mut().zip(&dmid) {
                *x += y;
            }
            // attention
            let (dh, dw_o) = linear_backward(&dx, &bc.h, d, d, self.w(b, Slot::Output));
            accumulate(&mut grads[base + Slot::Output as usize], &dw_o);
            let mut dq = vec![0.0; l * d];
            let mut dk = vec![0.0; l * d];
            let mut dv = vec![0.0; l * d];
            let mut dp = vec![0.0; l];
            for i in 0..l {
                let dhi = &dh[i * d..(i + 1) * d];
                let prow = &bc.p[i * l..i * l + i + 1];
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = dot(dhi, &bc.v[j * d..(j + 1) * d]);
                    weighted += prow[j] * dp[j];
                    axpy(&mut dv[j * d..(j + 1) * d], prow[j], dhi);
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(&mut dq[i * d..(i + 1) * d], ds, &bc.k[j * d..(j + 1) * d]);
                    axpy(&mut dk[j * d..(j + 1) * d], ds, &bc.q[i * d..(i + 1) * d]);
                }
            }
            let (da_q, dw_q) = linear_backward(&dq, &bc.a, d, d, self.w(b, Slot::Query));
            let (da_k, dw_k) = linear_backward(&dk, &bc.a, d, d, self.w(b, Slot::Key));
            let (da_v, dw_v) = linear_backward(&dv, &bc.a, d, d, self.w(b, Slot::Value));
            accumulate(&mut grads[base + Slot::Query as usize], &dw_q);
            accumulate(&mut grads[base + Slot::Key as usize], &dw_k);
            accumulate(&mut grads[base + Slot::Value as usize], &dw_v);
            let da: Vec<f64> = (0..l * d).map(|i| da_q[i] + da_k[i] + da_v[i]).collect();
            let din = rms_norm_backward(&da, &bc.a, &bc.r1, d);
            for (x, y) in dx.iter_mut().zip(&din) {
                *x += y;
            }
            let _ = &bc.x_in;
            let _ = &bc.x_mid;
        }
        // input embedding
        for (i, &t) in seq.iter().enumerate() {
            axpy(grads[0].row_mut(t as usize), 1.0, &dx[i * d..(i + 1) * d]);
        }
        Ok(loss)
    }

    /// Zero gradient buffers shaped like the weights.
    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect()
    }

    /// Runs `tokens` through the model, returning a cache positioned after them.
    pub fn begin(&self, tokens: &[u32]) -> Result<KvCache> {
        self.check_tokens(tokens)?;
        let mut cache = KvCache {
            keys: vec![Vec::new(); self.config.n_blocks],
            values: vec![Vec::new(); self.config.n_blocks],
            len: 0,
            last_hidden: Vec::new(),
        };
        for &t in tokens {
            self.advance(&mut cache, t)?;
        }
        Ok(cache)
    }

    /// Appends one token to the cache and updates its final hidden state.
    pub fn advance(&self, cache: &mut KvCache, token: u32) -> Result<()> {
        let d = self.config.d_model;
        let fw = self.config.ffn_width;
        if cache.len >= self.config.ctx_len {
            return Err(GemsError::InvalidArgument("context length exceeded while decoding".into()));
        }
        if token as usize >= self.vocab.size() {
            return Err(GemsError::InvalidArgument(format!("token {token} outside vocabulary")));
        }
        let pos = cache.len;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = self.embed_tokens(&[token], pos);
        for b in 0..self.config.n_blocks {
            let (a, _) = rms_norm(&x, d);
            let q = linear(&a, d, self.w(b, Slot::Query));
            let k = linear(&a, d, self.w(b, Slot::Key));
            let v = linear(&a, d, self.w(b, Slot::Value));
            cache.keys[b].extend_from_slice(&k);
            cache.values[b].extend_from_slice(&v);
            let n = pos + 1;
            let mut s: Vec<f64> = (0..n)
                .map(|j| dot(&q, &cache.keys[b][j * d..(j + 1) * d]) * scale)
                .collect();
            softmax_in_place(&mut s);
            let mut h = vec![0.0; d];
            for (j, &pj) in s.iter().enumerate() {
                axpy(&mut h, pj, &cache.values[b][j * d..(j + 1) * d]);
            }
            let o = linear(&h, d, self.w(b, Slot::Output));
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let (a2, _) = rms_norm(&x, d);
            let u = linear(&a2, d, self.w(b, Slot::Up));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let dn = linear(&g, fw, self.w(b, Slot::Down));
            for (xi, di) in x.iter_mut().zip(&dn) {
                *xi += di;
            }
        }
        cache.last_hidden = rms_norm(&x, d).0;
        cache.len += 1;
        Ok(())
    }

    pub fn cache_log_probs(&self, cache: &KvCache, level: usize) -> Vec<f64> {
        self.level_log_probs(&cache.last_hidden, level)
    }

    /// Inputs seen by every layer at the last position of `tokens`.
    pub fn layer_inputs(&self, tokens: &[u32]) -> Result<LayerInputs> {
        self.check_tokens(tokens)?;
        let c = self.forward(tokens);
        let d = self.config.d_model;
        let fw = self.config.ffn_width;
        let last = c.len - 1;
        let mut out = vec![Vec::new(); self.weights.len()];
        out[0] = c.af[last * d..(last + 1) * d].to_vec();
        for (b, bc) in c.blocks.iter().enumerate() {
            let base = 1 + 6 * b;
            let a = bc.a[last * d..(last + 1) * d].to_vec();
            out[base + Slot::Query as usize] = a.clone();
            out[base + Slot::Key as usize] = a.clone();
            out[base + Slot::Value as usize] = a;
            out[base + Slot::Output as usize] = bc.h[last * d..(last + 1) * d].to_vec();
            out[base + Slot::Up as usize] = bc.a2[last * d..(last + 1) * d].to_vec();
            out[base + Slot::Down as usize] = bc.g[last * fw..(last + 1) * fw].to_vec();
        }
        Ok(out)
    }

    /// Residual stream after every block plus the normalized final state,
    /// each as an `L x d` matrix.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Vec<Matrix>> {
        self.check_tokens(tokens)?;
        let c = self.forward(tokens);
        let d = self.config.d_model;
        let mut out: Vec<Matrix> = c
            .blocks
            .iter()
            .skip(1)
            .map(|bc| Matrix::from_vec_unchecked(c.len, d, bc.x_in.clone()))
            .collect();
        out.push(Matrix::from_vec_unchecked(c.len, d, c.x_final.clone()));
        out.push(Matrix::from_vec_unchecked(c.len, d, c.af.clone()));
        Ok(out)
    }
}

/// A prompt and its target identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub prompt: Vec<u32>,
    pub target: ItemId,
}

impl TunableModel for ToyModel {
    type Sample = TrainSample;

    fn weights(&self) -> &[Matrix] {
        &self.weights
    }
    fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }
    fn layer_names(&self) -> &[String] {
        &self.names
    }
    fn loss_and_grad_sum(&self, samples: &[TrainSample]) -> Result<(f64, Vec<Matrix>)> {
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for s in samples {
            total += self.nll_backward(&s.prompt, &s.target, &mut grads)?;
        }
        Ok((total, grads))
    }
    fn loss_sum(&self, samples: &[TrainSample]) -> Result<f64> {
        samples.iter().map(|s| self.nll(&s.prompt, &s.target)).sum()
    }
}

/// `x Wᵀ` for `x` of shape `L x in` and `W` of shape `out x in`.
fn linear(x: &[f64], in_dim: usize, w: &Matrix) -> Vec<f64> {
    debug_assert_eq!(w.cols(), in_dim);
    let l = x.len() / in_dim;
    let out_dim = w.rows();
    let mut y = vec![0.0; l * out_dim];
    for i in 0..l {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let yi = &mut y[i * out_dim..(i + 1) * out_dim];
        for (o, yo) in yi.iter_mut().enumerate() {
            *yo = dot(xi, w.row(o));
        }
    }
    y
}

/// Backward of [`linear`]: returns `(dx, dW)` for upstream `dy` (`L x out`).
fn linear_backward(dy: &[f64], x: &[f64], in_dim: usize, out_dim: usize, w: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let l = x.len() / in_dim;
    let mut dx = vec![0.0; l * in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    for i in 0..l {
        let dyi = &dy[i * out_dim..(i + 1) * out_dim];
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(dxi, g, w.row(o));
            axpy(&mut dw[o * in_dim..(o + 1) * in_dim], g, xi);
        }
    }
    (dx, dw)
}

fn accumulate(into: &mut Matrix, dw: &[f64]) {
    for (a, b) in into.as_mut_slice().iter_mut().zip(dw) {
        *a += b;
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn rms_norm(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let l = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut r = vec![0.0; l];
    for i in 0..l {
        let xi = &x[i * d..(i + 1) * d];
        let ri = (dot(xi, xi) / d as f64 + NORM_EPS).sqrt();
        r[i] = ri;
        for (yj, xj) in y[i * d..(i + 1) * d].iter_mut().zip(xi) {
            *yj = xj / ri;
        }
    }
    (y, r)
}

/// `dx = (dy - y * mean(dy ⊙ y)) / r` row by row.
fn rms_norm_backward(dy: &[f64], y: &[f64], r: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for (i, &ri) in r.iter().enumerate() {
        let dyi = &dy[i * d..(i + 1) * d];
        let yi = &y[i * d..(i + 1) * d];
        let m = dot(dyi, yi) / d as f64;
        for j in 0..d {
            dx[i * d + j] = (dyi[j] - yi[j] * m) / ri;
        }
    }
    dx
}

#[inline]
fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

#[inline]
fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Log-sum-exp with max subtraction.
pub(crate) fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}
