//! A tiny bidirectional-transformer denoiser with hand-written reverse-mode
//! gradients. Consumes a sequence of embedding vectors (hard or soft) and
//! returns per-position categorical predictions over the vocabulary; MASK is
//! never predicted. Trainable at desk scale on synthetic corpora.

use crate::probcore::{forward_mask, Categorical, NoiseSchedule, TokenId};
use crate::tensor::Matrix;
use crate::{Error, Result};
use rand::Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const LN_EPS: f64 = 1e-5;
const TOKEN_INIT_STD: f64 = 0.08;
/// MASK-row init is scaled down relative to token rows so soft mixtures stay
/// in the small-norm regime the stability probes assume (target ratio 0.38).
const MASK_INIT_RATIO: f64 = 0.38;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub v: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d == 0
            || self.d_ff == 0
            || self.l_max == 0
            || self.v == 0
        {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }

    /// Token id used for MASK; the embedding table has V + 1 rows with MASK
    /// as the last.
    pub fn mask_token(&self) -> TokenId {
        self.v
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1_scale: Matrix,
    pub ln1_bias: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
    pub ln2_scale: Matrix,
    pub ln2_bias: Matrix,
}

/// All trainable tensors; gradients and optimizer state reuse the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub table: Matrix,
    pub positional: Matrix,
    pub layers: Vec<LayerParams>,
    pub head: Matrix,
}

impl ParamSet {
    pub fn zeros(cfg: &DenoiserConfig) -> Self {
        let layer = || LayerParams {
            w_q: Matrix::zeros(cfg.d, cfg.d),
            w_k: Matrix::zeros(cfg.d, cfg.d),
            w_v: Matrix::zeros(cfg.d, cfg.d),
            w_o: Matrix::zeros(cfg.d, cfg.d),
            ln1_scale: Matrix::zeros(1, cfg.d),
            ln1_bias: Matrix::zeros(1, cfg.d),
            w_ff1: Matrix::zeros(cfg.d, cfg.d_ff),
            b_ff1: Matrix::zeros(1, cfg.d_ff),
            w_ff2: Matrix::zeros(cfg.d_ff, cfg.d),
            b_ff2: Matrix::zeros(1, cfg.d),
            ln2_scale: Matrix::zeros(1, cfg.d),
            ln2_bias: Matrix::zeros(1, cfg.d),
        };
        ParamSet {
            table: Matrix::zeros(cfg.v + 1, cfg.d),
            positional: Matrix::zeros(cfg.l_max, cfg.d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            head: Matrix::zeros(cfg.d, cfg.v),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("table".to_string(), &self.table),
            ("positional".to_string(), &self.positional),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_q"), &l.w_q));
            out.push((format!("layer{i}.w_k"), &l.w_k));
            out.push((format!("layer{i}.w_v"), &l.w_v));
            out.push((format!("layer{i}.w_o"), &l.w_o));
            out.push((format!("layer{i}.ln1_scale"), &l.ln1_scale));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.w_ff1"), &l.w_ff1));
            out.push((format!("layer{i}.b_ff1"), &l.b_ff1));
            out.push((format!("layer{i}.w_ff2"), &l.w_ff2));
            out.push((format!("layer{i}.b_ff2"), &l.b_ff2));
            out.push((format!("layer{i}.ln2_scale"), &l.ln2_scale));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("table".to_string(), &mut self.table),
            ("positional".to_string(), &mut self.positional),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_q"), &mut l.w_q));
            out.push((format!("layer{i}.w_k"), &mut l.w_k));
            out.push((format!("layer{i}.w_v"), &mut l.w_v));
            out.push((format!("layer{i}.w_o"), &mut l.w_o));
            out.push((format!("layer{i}.ln1_scale"), &mut l.ln1_scale));
            out.push((format!("layer{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.w_ff1"), &mut l.w_ff1));
            out.push((format!("layer{i}.b_ff1"), &mut l.b_ff1));
            out.push((format!("layer{i}.w_ff2"), &mut l.w_ff2));
            out.push((format!("layer{i}.b_ff2"), &mut l.b_ff2));
            out.push((format!("layer{i}.ln2_scale"), &mut l.ln2_scale));
            out.push((format!("layer{i}.ln2_bias"), &mut l.ln2_bias));
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// Per-position distributions over V tokens (MASK excluded).
    pub dists: Vec<Categorical>,
    /// Raw logits, L x V.
    pub logits: Matrix,
}

impl DenoiserModel {
    pub fn init(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let w_std = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::zeros(&config);
        params.table = Matrix::randn(config.v + 1, d, TOKEN_INIT_STD, rng);
        // Shrink the MASK row toward the origin.
        for x in params.table.row_mut(config.v) {
            *x *= MASK_INIT_RATIO;
        }
        params.positional = Matrix::randn(config.l_max, d, 0.02, rng);
        for l in params.layers.iter_mut() {
            l.w_q = Matrix::randn(d, d, w_std, rng);
            l.w_k = Matrix::randn(d, d, w_std, rng);
            l.w_v = Matrix::randn(d, d, w_std, rng);
            l.w_o = Matrix::randn(d, d, w_std, rng);
            l.ln1_scale = Matrix::from_fn(1, d, |_, _| 1.0);
            l.ln2_scale = Matrix::from_fn(1, d, |_, _| 1.0);
            l.w_ff1 = Matrix::randn(d, config.d_ff, w_std, rng);
            l.w_ff2 = Matrix::randn(config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt(), rng);
        }
        // Zero head: the untrained model predicts the uniform distribution.
        Ok(DenoiserModel { config, params })
    }

    pub fn mask_embedding(&self) -> &[f64] {
        self.params.table.row(self.config.v)
    }

    /// Embedding row lookup plus positional vector addition.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if tokens.len() > self.config.l_max {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.l_max,
            });
        }
        tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                if tok > self.config.v {
                    return Err(Error::TokenOutOfRange {
                        id: tok,
                        vocab: self.config.v,
                    });
                }
                Ok(self
                    .params
                    .table
                    .row(tok)
                    .iter()
                    .zip(self.params.positional.row(i))
                    .map(|(e, p)| e + p)
                    .collect())
            })
            .collect()
    }

    /// Full bidirectional forward pass over content embeddings (positional
    /// vectors are added internally).
    pub fn forward(&self, embeddings: &[Vec<f64>]) -> Result<DenoiserOutput> {
        let x = self.input_matrix(embeddings)?;
        let (out, _) = self.forward_cached(&x)?;
        Ok(out)
    }

    fn input_matrix(&self, embeddings: &[Vec<f64>]) -> Result<Matrix> {
        let l = embeddings.len();
        if l > self.config.l_max {
            return Err(Error::SequenceTooLong {
                len: l,
                max: self.config.l_max,
            });
        }
        let mut x = Matrix::zeros(l, self.config.d);
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != self.config.d {
                return Err(Error::DimensionMismatch {
                    expected: self.config.d,
                    got: e.len(),
                });
            }
            for (j, (&ev, &pv)) in e.iter().zip(self.params.positional.row(i)).enumerate() {
                x.set(i, j, ev + pv);
            }
        }
        Ok(x)
    }

    fn forward_cached(&self, x0: &Matrix) -> Result<(DenoiserOutput, ForwardCache)> {
        let mut x = x0.clone();
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for layer in &self.params.layers {
            let (next, cache) = self.layer_forward(layer, &x);
            layers.push(cache);
            x = next;
        }
        let logits = x.matmul(&self.params.head);
        let mut probs = Matrix::zeros(logits.rows, logits.cols);
        let mut dists = Vec::with_capacity(logits.rows);
        for i in 0..logits.rows {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs.set(i, j, e);
                z += e;
            }
            for j in 0..logits.cols {
                probs.set(i, j, probs.get(i, j) / z);
            }
            dists.push(Categorical::from_weights(probs.row(i).to_vec())?);
        }
        let out = DenoiserOutput {
            dists,
            logits: logits.clone(),
        };
        let cache = ForwardCache {
            x_input: x0.clone(),
            layers,
            x_final: x,
            probs,
        };
        Ok((out, cache))
    }

    fn layer_forward(&self, p: &LayerParams, x_in: &Matrix) -> (Matrix, LayerCache) {
        let (xn1, ln1) = layer_norm(x_in, &p.ln1_scale, &p.ln1_bias);
        let q = xn1.matmul(&p.w_q);
        let k = xn1.matmul(&p.w_k);
        let v = xn1.matmul(&p.w_v);
        let (heads_out, attn) = self.attention(&q, &k, &v);
        let attn_proj = heads_out.matmul(&p.w_o);
        let mut h = x_in.clone();
        h.add_scaled(&attn_proj, 1.0);

        let (xn2, ln2) = layer_norm(&h, &p.ln2_scale, &p.ln2_bias);
        let mut ff_pre = xn2.matmul(&p.w_ff1);
        for i in 0..ff_pre.rows {
            for j in 0..ff_pre.cols {
                ff_pre.set(i, j, ff_pre.get(i, j) + p.b_ff1.get(0, j));
            }
        }
        let ff_act = Matrix::from_fn(ff_pre.rows, ff_pre.cols, |i, j| silu(ff_pre.get(i, j)));
        let mut out = ff_act.matmul(&p.w_ff2);
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.set(i, j, out.get(i, j) + p.b_ff2.get(0, j));
            }
        }
        out.add_scaled(&h, 1.0);
        let cache = LayerCache {
            ln1,
            xn1,
            q,
            k,
            v,
            attn,
            heads_out,
            ln2,
            xn2,
            ff_pre,
            ff_act,
        };
        (out, cache)
    }

    /// Multi-head attention over full (non-causal) context. Returns the
    /// concatenated per-head outputs and the attention rows per head.
    fn attention(&self, q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Vec<Matrix>) {
        let l = q.rows;
        let dh = self.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_out = Matrix::zeros(l, self.config.d);
        let mut attn = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let off = h * dh;
            let mut a = Matrix::zeros(l, l);
            for i in 0..l {
                let qi = &q.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    let kj = &k.row(j)[off..off + dh];
                    let s = crate::tensor::dot(qi, kj) * scale;
                    a.set(i, j, s);
                    max = max.max(s);
                }
                let mut z = 0.0;
                for j in 0..l {
                    let e = (a.get(i, j) - max).exp();
                    a.set(i, j, e);
                    z += e;
                }
                for j in 0..l {
                    a.set(i, j, a.get(i, j) / z);
                }
            }
            for i in 0..l {
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += a.get(i, j) * v.get(j, off + c);
                    }
                    heads_out.set(i, off + c, acc);
                }
            }
            attn.push(a);
        }
        (heads_out, attn)
    }

    /// The raw multi-head attention map of one layer applied to content
    /// matrix `x` (no layer norm, no residual, no feed-forward). Used by the
    /// stability probes.
    pub fn attention_map(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        self.attention_map_frozen_qk(layer, x, x)
    }

    /// Attention with queries/keys computed from `x_qk` while values come
    /// from `x_v`; with `x_qk` held fixed the map is linear in `x_v`.
    pub fn attention_map_frozen_qk(&self, layer: usize, x_qk: &Matrix, x_v: &Matrix) -> Result<Matrix> {
        let p = self
            .params
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
        let q = x_qk.matmul(&p.w_q);
        let k = x_qk.matmul(&p.w_k);
        let v = x_v.matmul(&p.w_v);
        let (heads_out, _) = self.attention(&q, &k, &v);
        Ok(heads_out.matmul(&p.w_o))
    }

    /// Exact per-head matrices consumed by the stability module:
    /// (W_Q^h (W_K^h)^T, W_V^h).
    pub fn spectral_inputs(&self, layer: usize, head: usize) -> Result<(Matrix, Matrix)> {
        let p = self
            .params
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
        if head >= self.config.n_heads {
            return Err(Error::InvalidArgument(format!("head {head} out of range")));
        }
        let dh = self.config.d_head();
        let off = head * dh;
        let slice = |m: &Matrix| {
            Matrix::from_fn(self.config.d, dh, |i, j| m.get(i, off + j))
        };
        let wq = slice(&p.w_q);
        let wk = slice(&p.w_k);
        let wv = slice(&p.w_v);
        Ok((wq.matmul(&wk.transpose()), wv))
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Matrix,
        grads: &mut ParamSet,
    ) -> Matrix {
        grads
            .head
            .add_scaled(&cache.x_final.transpose().matmul(d_logits), 1.0);
        let mut dx = d_logits.matmul(&self.params.head.transpose());
        for (li, layer) in self.params.layers.iter().enumerate().rev() {
            dx = self.layer_backward(layer, &cache.layers[li], &dx, &mut grads.layers[li]);
        }
        dx
    }

    fn layer_backward(
        &self,
        p: &LayerParams,
        c: &LayerCache,
        d_out: &Matrix,
        g: &mut LayerParams,
    ) -> Matrix {
        let l = d_out.rows;
        // Feed-forward branch.
        let d_ff_out = d_out;
        for j in 0..self.config.d {
            let mut acc = 0.0;
            for i in 0..l {
                acc += d_ff_out.get(i, j);
            }
            g.b_ff2.set(0, j, g.b_ff2.get(0, j) + acc);
        }
        g.w_ff2
            .add_scaled(&c.ff_act.transpose().matmul(d_ff_out), 1.0);
        let d_ff_act = d_ff_out.matmul(&p.w_ff2.transpose());
        let d_ff_pre = Matrix::from_fn(l, self.config.d_ff, |i, j| {
            d_ff_act.get(i, j) * silu_grad(c.ff_pre.get(i, j))
        });
        for j in 0..self.config.d_ff {
            let mut acc = 0.0;
            for i in 0..l {
                acc += d_ff_pre.get(i, j);
            }
            g.b_ff1.set(0, j, g.b_ff1.get(0, j) + acc);
        }
        g.w_ff1
            .add_scaled(&c.xn2.transpose().matmul(&d_ff_pre), 1.0);
        let d_xn2 = d_ff_pre.matmul(&p.w_ff1.transpose());
        let d_h_ln = layer_norm_backward(&d_xn2, &c.ln2, &p.ln2_scale, &mut g.ln2_scale, &mut g.ln2_bias);
        // Residual: d_h = d_out + d through LN2.
        let mut d_h = d_out.clone();
        d_h.add_scaled(&d_h_ln, 1.0);

        // Attention branch.
        let d_attn_proj = &d_h;
        g.w_o
            .add_scaled(&c.heads_out.transpose().matmul(d_attn_proj), 1.0);
        let d_heads_out = d_attn_proj.matmul(&p.w_o.transpose());
        let dh_dim = self.config.d_head();
        let scale = 1.0 / (dh_dim as f64).sqrt();
        let mut d_q = Matrix::zeros(l, self.config.d);
        let mut d_k = Matrix::zeros(l, self.config.d);
        let mut d_v = Matrix::zeros(l, self.config.d);
        for h in 0..self.config.n_heads {
            let off = h * dh_dim;
            let a = &c.attn[h];
            // dA = dO_h V_h^T ; dV_h = A^T dO_h
            let mut d_a = Matrix::zeros(l, l);
            for i in 0..l {
                for j in 0..l {
                    let mut acc = 0.0;
                    for cdim in 0..dh_dim {
                        acc += d_heads_out.get(i, off + cdim) * c.v.get(j, off + cdim);
                    }
                    d_a.set(i, j, acc);
                }
            }
            for j in 0..l {
                for cdim in 0..dh_dim {
                    let mut acc = 0.0;
                    for i in 0..l {
                        acc += a.get(i, j) * d_heads_out.get(i, off + cdim);
                    }
                    d_v.set(j, off + cdim, d_v.get(j, off + cdim) + acc);
                }
            }
            // Softmax rows: dS_ij = A_ij (dA_ij - sum_k A_ik dA_ik).
            let mut d_s = Matrix::zeros(l, l);
            for i in 0..l {
                let mut inner = 0.0;
                for j in 0..l {
                    inner += a.get(i, j) * d_a.get(i, j);
                }
                for j in 0..l {
                    d_s.set(i, j, a.get(i, j) * (d_a.get(i, j) - inner));
                }
            }
            for i in 0..l {
                for cdim in 0..dh_dim {
                    let mut acc_q = 0.0;
                    for j in 0..l {
                        acc_q += d_s.get(i, j) * c.k.get(j, off + cdim);
                    }
                    d_q.set(i, off + cdim, d_q.get(i, off + cdim) + acc_q * scale);
                }
            }
            for j in 0..l {
                for cdim in 0..dh_dim {
                    let mut acc_k = 0.0;
                    for i in 0..l {
                        acc_k += d_s.get(i, j) * c.q.get(i, off + cdim);
                    }
                    d_k.set(j, off + cdim, d_k.get(j, off + cdim) + acc_k * scale);
                }
            }
        }
        g.w_q.add_scaled(&c.xn1.transpose().matmul(&d_q), 1.0);
        g.w_k.add_scaled(&c.xn1.transpose().matmul(&d_k), 1.0);
        g.w_v.add_scaled(&c.xn1.transpose().matmul(&d_v), 1.0);
        let mut d_xn1 = d_q.matmul(&p.w_q.transpose());
        d_xn1.add_scaled(&d_k.matmul(&p.w_k.transpose()), 1.0);
        d_xn1.add_scaled(&d_v.matmul(&p.w_v.transpose()), 1.0);
        let d_x_ln = layer_norm_backward(&d_xn1, &c.ln1, &p.ln1_scale, &mut g.ln1_scale, &mut g.ln1_bias);
        let mut d_x = d_h;
        d_x.add_scaled(&d_x_ln, 1.0);
        d_x
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    xn1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    heads_out: Matrix,
    ln2: LnCache,
    xn2: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
}

struct ForwardCache {
    x_input: Matrix,
    layers: Vec<LayerCache>,
    x_final: Matrix,
    probs: Matrix,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn layer_norm(x: &Matrix, scale: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (l, d) = (x.rows, x.cols);
    let mut xhat = Matrix::zeros(l, d);
    let mut inv_std = Vec::with_capacity(l);
    let mut y = Matrix::zeros(l, d);
    for i in 0..l {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat.set(i, j, xh);
            y.set(i, j, xh * scale.get(0, j) + bias.get(0, j));
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    d_y: &Matrix,
    cache: &LnCache,
    scale: &Matrix,
    g_scale: &mut Matrix,
    g_bias: &mut Matrix,
) -> Matrix {
    let (l, d) = (d_y.rows, d_y.cols);
    let mut d_x = Matrix::zeros(l, d);
    for j in 0..d {
        let mut gs = 0.0;
        let mut gb = 0.0;
        for i in 0..l {
            gs += d_y.get(i, j) * cache.xhat.get(i, j);
            gb += d_y.get(i, j);
        }
        g_scale.set(0, j, g_scale.get(0, j) + gs);
        g_bias.set(0, j, g_bias.get(0, j) + gb);
    }
    for i in 0..l {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = d_y.get(i, j) * scale.get(0, j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.xhat.get(i, j);
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            let dxh = d_y.get(i, j) * scale.get(0, j);
            d_x.set(
                i,
                j,
                is * (dxh - mean_dxhat - cache.xhat.get(i, j) * mean_dxhat_xhat),
            );
        }
    }
    d_x
}

/// Momentum SGD; avoids adaptive-state nondeterminism across platforms.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(cfg: &DenoiserConfig, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: ParamSet::zeros(cfg),
        }
    }

    pub fn step(&mut self, model: &mut DenoiserModel, grads: &ParamSet) {
        let g = grads.tensors();
        for (((_, vel), (_, param)), (_, grad)) in self
            .velocity
            .tensors_mut()
            .into_iter()
            .zip(model.params.tensors_mut())
            .zip(g)
        {
            for ((v, p), &gr) in vel.data.iter_mut().zip(param.data.iter_mut()).zip(&grad.data) {
                *v = self.momentum * *v + gr;
                *p -= self.lr * *v;
            }
        }
    }
}

/// A corrupted training instance: per-position input token (clean or MASK)
/// and the masked-position target set.
struct CorruptedSeq {
    inputs: Vec<TokenId>,
    targets: Vec<TokenId>,
    masked: Vec<bool>,
}

fn corrupt(
    x0: &[TokenId],
    t: usize,
    schedule: &NoiseSchedule,
    mask_token: TokenId,
    rng: &mut impl Rng,
) -> CorruptedSeq {
    let noisy = forward_mask(x0, t, schedule, rng);
    let inputs = noisy
        .iter()
        .map(|p| p.unwrap_or(mask_token))
        .collect::<Vec<_>>();
    let masked = noisy.iter().map(|p| p.is_none()).collect();
    CorruptedSeq {
        inputs,
        targets: x0.to_vec(),
        masked,
    }
}

/// Mean cross-entropy over the masked positions of a corrupted batch, plus
/// parameter gradients when `grads` is provided.
fn masked_ce(
    model: &DenoiserModel,
    batch: &[CorruptedSeq],
    mut grads: Option<&mut ParamSet>,
) -> Result<f64> {
    let n_masked: usize = batch.iter().map(|s| s.masked.iter().filter(|m| **m).count()).sum();
    if n_masked == 0 {
        return Ok(0.0);
    }
    let weight = 1.0 / n_masked as f64;
    let mut loss = 0.0;
    for seq in batch {
        let content: Vec<Vec<f64>> = seq
            .inputs
            .iter()
            .map(|&tok| model.params.table.row(tok).to_vec())
            .collect();
        let x = model.input_matrix(&content)?;
        let (out, cache) = model.forward_cached(&x)?;
        let mut d_logits = Matrix::zeros(out.logits.rows, out.logits.cols);
        for (i, (&target, &is_masked)) in seq.targets.iter().zip(&seq.masked).enumerate() {
            if !is_masked {
                continue;
            }
            let p = cache.probs.get(i, target).max(1e-300);
            loss -= weight * p.ln();
            if grads.is_some() {
                for j in 0..model.config.v {
                    let soft = cache.probs.get(i, j);
                    let delta = if j == target { soft - 1.0 } else { soft };
                    d_logits.set(i, j, weight * delta);
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let d_input = model.backward(&cache, &d_logits, g);
            debug_assert_eq!(d_input.rows, cache.x_input.rows);
            for (i, &tok) in seq.inputs.iter().enumerate() {
                for j in 0..model.config.d {
                    let dv = d_input.get(i, j);
                    let old = g.table.get(tok, j);
                    g.table.set(tok, j, old + dv);
                    let oldp = g.positional.get(i, j);
                    g.positional.set(i, j, oldp + dv);
                }
            }
        }
    }
    Ok(loss)
}

/// One training step: sample a timestep per sequence, corrupt, compute mean
/// masked cross-entropy, apply one momentum-SGD update.
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &mut Sgd,
    batch: &[Vec<TokenId>],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mask_token = model.config.mask_token();
    let corrupted: Vec<CorruptedSeq> = batch
        .iter()
        .map(|x0| {
            let t = rng.gen_range(1..=schedule.t_max());
            corrupt(x0, t, schedule, mask_token, rng)
        })
        .collect();
    let mut grads = ParamSet::zeros(&model.config);
    let loss = masked_ce(model, &corrupted, Some(&mut grads))?;
    if !loss.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite loss {loss}")));
    }
    opt.step(model, &grads);
    Ok(loss)
}

/// Compares analytic gradients of the masked-CE loss to central finite
/// differences parameter-wise; returns the max relative error, with the
/// denominator guarded at 1e-8.
pub fn grad_check(model: &DenoiserModel, batch: &[Vec<TokenId>], h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("h must be > 0".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    use rand::SeedableRng;
    let schedule = NoiseSchedule::linear(4, 0.9)?;
    let mask_token = model.config.mask_token();
    // Fixed corruption so the loss is a deterministic function of the params.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let corrupted: Vec<CorruptedSeq> = batch
        .iter()
        .map(|x0| {
            let t = rng.gen_range(1..=schedule.t_max());
            corrupt(x0, t, &schedule, mask_token, &mut rng)
        })
        .collect();

    let mut grads = ParamSet::zeros(&model.config);
    masked_ce(model, &corrupted, Some(&mut grads))?;

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let names: Vec<String> = model.params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let len = model
            .params
            .tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m.data.len())
            .unwrap();
        for idx in 0..len {
            let orig = probe
                .params
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.data[idx])
                .unwrap();
            set_param(&mut probe, &name, idx, orig + h);
            let up = masked_ce(&probe, &corrupted, None)?;
            set_param(&mut probe, &name, idx, orig - h);
            let down = masked_ce(&probe, &corrupted, None)?;
            set_param(&mut probe, &name, idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.data[idx])
                .unwrap();
            let denom = (analytic.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

fn set_param(model: &mut DenoiserModel, name: &str, idx: usize, value: f64) {
    for (n, m) in model.params.tensors_mut() {
        if n == name {
            m.data[idx] = value;
            return;
        }
    }
    unreachable!("unknown tensor {name}");
}

const CKPT_VERSION: &str = "lrd-ckpt v1";

/// Writes the checkpoint: version line, then per tensor a header line
/// `name dtype shape-dims...` followed by row-major decimal values, one line
/// per row. A `config` pseudo-tensor carries the model dimensions.
pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CKPT_VERSION);
    out.push('\n');
    let c = &model.config;
    out.push_str("config f64 1 6\n");
    out.push_str(&format!(
        "{} {} {} {} {} {}\n",
        c.n_layers, c.n_heads, c.d, c.d_ff, c.l_max, c.v
    ));
    for (name, m) in model.params.tensors() {
        out.push_str(&format!("{name} f64 {} {}\n", m.rows, m.cols));
        for i in 0..m.rows {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let version = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Checkpoint("empty file".into()))?;
    if version.trim() != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint version {version:?}"
        )));
    }
    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    while let Some(header) = lines.next().transpose()? {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[1] != "f64" {
            return Err(Error::Checkpoint(format!("bad tensor header {header:?}")));
        }
        let name = parts[0].to_string();
        let rows: usize = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad shape in {header:?}")))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad shape in {header:?}")))?;
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let line = lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {name}")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} row {i}: expected {cols} values, got {}",
                    vals.len()
                )));
            }
            for (j, v) in vals.iter().enumerate() {
                m.set(
                    i,
                    j,
                    v.parse().map_err(|_| {
                        Error::Checkpoint(format!("bad value {v:?} in tensor {name}"))
                    })?,
                );
            }
        }
        tensors.push((name, m));
    }
    let take = |name: &str, tensors: &mut Vec<(String, Matrix)>| -> Result<Matrix> {
        let pos = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(tensors.remove(pos).1)
    };
    let cfg_m = take("config", &mut tensors)?;
    if cfg_m.data.len() != 6 {
        return Err(Error::Checkpoint("bad config tensor".into()));
    }
    let config = DenoiserConfig {
        n_layers: cfg_m.data[0] as usize,
        n_heads: cfg_m.data[1] as usize,
        d: cfg_m.data[2] as usize,
        d_ff: cfg_m.data[3] as usize,
        l_max: cfg_m.data[4] as usize,
        v: cfg_m.data[5] as usize,
    };
    config.validate()?;
    let mut params = ParamSet::zeros(&config);
    for (name, slot) in params.tensors_mut() {
        let m = take(&name, &mut tensors)?;
        if m.rows != slot.rows || m.cols != slot.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {}x{} does not match config {}x{}",
                m.rows, m.cols, slot.rows, slot.cols
            )));
        }
        *slot = m;
    }
    if let Some((name, _)) = tensors.first() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(DenoiserModel { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            n_layers: 2,
            n_heads: 2,
            d: 16,
            d_ff: 32,
            l_max: 8,
            v: 6,
        }
    }

    fn small_model(seed: u64) -> DenoiserModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenoiserModel::init(small_config(), &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.d = 15;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_lookup() {
        let model = small_model(1);
        let mask = model.config.mask_token();
        let emb = model.embed_tokens(&[mask, mask]).unwrap();
        for (i, e) in emb.iter().enumerate() {
            let expect: Vec<f64> = model
                .mask_embedding()
                .iter()
                .zip(model.params.positional.row(i))
                .map(|(a, b)| a + b)
                .collect();
            assert_eq!(e, &expect);
        }
        let emb2 = model.embed_tokens(&[3]).unwrap();
        let expect: Vec<f64> = model
            .params
            .table
            .row(3)
            .iter()
            .zip(model.params.positional.row(0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(emb2[0], expect);
        assert_eq!(model.embed_tokens(&[3]).unwrap(), emb2);
        assert!(model.embed_tokens(&[mask + 1]).is_err());
    }

    #[test]
    fn forward_simplex_and_purity() {
        let model = small_model(2);
        let content: Vec<Vec<f64>> = vec![model.mask_embedding().to_vec(); 4];
        let out1 = model.forward(&content).unwrap();
        let out2 = model.forward(&content).unwrap();
        for d in &out1.dists {
            let s: f64 = d.probs().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(d.probs().iter().all(|p| *p >= 0.0));
            assert_eq!(d.len(), model.config.v);
        }
        assert_eq!(out1.logits, out2.logits);

        // Extreme-norm inputs still land on the simplex.
        let big: Vec<Vec<f64>> = vec![vec![1e6; model.config.d]; 3];
        let out = model.forward(&big).unwrap();
        for d in &out.dists {
            let s: f64 = d.probs().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn length_overflow_rejected() {
        let model = small_model(3);
        let content: Vec<Vec<f64>> = vec![vec![0.0; model.config.d]; model.config.l_max + 1];
        assert!(model.forward(&content).is_err());
    }

    #[test]
    fn zero_head_loss_is_ln_v() {
        let model = small_model(4);
        let corrupted = vec![CorruptedSeq {
            inputs: vec![model.config.mask_token(); 4],
            targets: vec![1, 2, 3, 4],
            masked: vec![true; 4],
        }];
        let loss = masked_ce(&model, &corrupted, None).unwrap();
        assert!((loss - (model.config.v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_scale_linearity_and_frozen_zero() {
        let model = small_model(5);
        let corrupted = vec![CorruptedSeq {
            inputs: vec![model.config.mask_token(), 2, model.config.mask_token()],
            targets: vec![1, 2, 3],
            masked: vec![true, false, true],
        }];
        let mut g1 = ParamSet::zeros(&model.config);
        masked_ce(&model, &corrupted, Some(&mut g1)).unwrap();
        // Doubling the loss = summing gradients of two identical batches.
        let doubled = vec![
            CorruptedSeq {
                inputs: corrupted[0].inputs.clone(),
                targets: corrupted[0].targets.clone(),
                masked: corrupted[0].masked.clone(),
            },
            CorruptedSeq {
                inputs: corrupted[0].inputs.clone(),
                targets: corrupted[0].targets.clone(),
                masked: corrupted[0].masked.clone(),
            },
        ];
        let mut g2 = ParamSet::zeros(&model.config);
        masked_ce(&model, &doubled, Some(&mut g2)).unwrap();
        // masked_ce averages over masked positions, so the mean (and its
        // gradient) is unchanged; scale g1 for an exact comparison.
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        // Positional rows beyond the sequence never enter the loss.
        for i in 3..model.config.l_max {
            assert!(g1.positional.row(i).iter().all(|v| v.abs() < 1e-10));
        }
        // Token rows that never appear get zero embedding gradient.
        assert!(g1.table.row(5).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn overfit_single_sequence() {
        // "ABBA" with A = 1, B = 2.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = DenoiserConfig {
            n_layers: 2,
            n_heads: 2,
            d: 16,
            d_ff: 32,
            l_max: 4,
            v: 4,
        };
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        let mut opt = Sgd::new(&cfg, 0.02, 0.9);
        let schedule = NoiseSchedule::linear(4, 1.0).unwrap();
        let seq = vec![1usize, 2, 2, 1];
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = train_step(&mut model, &mut opt, &[seq.clone()], &schedule, &mut rng).unwrap();
        }
        assert!(last < 0.01, "final loss {last}");
        // All-MASK input reproduces the string.
        let content: Vec<Vec<f64>> = vec![model.mask_embedding().to_vec(); 4];
        let out = model.forward(&content).unwrap();
        let decoded: Vec<usize> = out.dists.iter().map(|d| d.argmax()).collect();
        assert_eq!(decoded, seq);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config();
        let schedule = NoiseSchedule::linear(4, 0.9).unwrap();
        let batch = vec![vec![1usize, 2, 3, 4], vec![4, 3, 2, 1]];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
            let mut opt = Sgd::new(&cfg, 0.1, 0.9);
            for _ in 0..30 {
                train_step(&mut model, &mut opt, &batch, &schedule, &mut rng).unwrap();
            }
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn spectral_inputs_shapes_and_identity() {
        let mut model = small_model(6);
        let d = model.config.d;
        let dh = model.config.d_head();
        let (qk, wv) = model.spectral_inputs(0, 1).unwrap();
        assert_eq!((qk.rows, qk.cols), (d, d));
        assert_eq!((wv.rows, wv.cols), (d, dh));
        // Round-trip: returned matrices match the stored parameters.
        let p = &model.params.layers[0];
        for i in 0..d {
            for j in 0..dh {
                assert_eq!(wv.get(i, j), p.w_v.get(i, dh + j));
            }
        }
        assert!(model.spectral_inputs(9, 0).is_err());
        assert!(model.spectral_inputs(0, 9).is_err());

        // Identity W_Q, W_K with a single head: product is the identity.
        let mut cfg = small_config();
        cfg.n_heads = 1;
        model = DenoiserModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let eye = Matrix::from_fn(cfg.d, cfg.d, |i, j| if i == j { 1.0 } else { 0.0 });
        model.params.layers[0].w_q = eye.clone();
        model.params.layers[0].w_k = eye.clone();
        let (qk, _) = model.spectral_inputs(0, 0).unwrap();
        assert_eq!(qk, eye);
    }

    #[test]
    fn attention_linear_in_values() {
        // With queries/keys frozen, attention output is linear in the value
        // inputs: check superposition on a 1-layer model.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = DenoiserConfig {
            n_layers: 1,
            n_heads: 2,
            d: 16,
            d_ff: 16,
            l_max: 6,
            v: 4,
        };
        let model = DenoiserModel::init(cfg, &mut rng).unwrap();
        let x_qk = Matrix::randn(5, cfg.d, 0.5, &mut rng);
        let x1 = Matrix::randn(5, cfg.d, 0.5, &mut rng);
        let x2 = Matrix::randn(5, cfg.d, 0.5, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut combo = Matrix::zeros(5, cfg.d);
        combo.add_scaled(&x1, a);
        combo.add_scaled(&x2, b);
        let f_combo = model.attention_map_frozen_qk(0, &x_qk, &combo).unwrap();
        let f1 = model.attention_map_frozen_qk(0, &x_qk, &x1).unwrap();
        let f2 = model.attention_map_frozen_qk(0, &x_qk, &x2).unwrap();
        let mut expect = Matrix::zeros(5, cfg.d);
        expect.add_scaled(&f1, a);
        expect.add_scaled(&f2, b);
        for (u, v) in f_combo.data.iter().zip(&expect.data) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = small_model(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.config, loaded.config);
        assert_eq!(model.params, loaded.params);
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "lrd-ckpt v9\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn mask_row_norm_ratio() {
        let model = small_model(21);
        let mask_norm = crate::tensor::l2_norm(model.mask_embedding());
        let mean_tok: f64 = (0..model.config.v)
            .map(|vtok| crate::tensor::l2_norm(model.params.table.row(vtok)))
            .sum::<f64>()
            / model.config.v as f64;
        let ratio = mask_norm / mean_tok;
        assert!((0.2..0.6).contains(&ratio), "ratio {ratio}");
    }
}
