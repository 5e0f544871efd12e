//! Forward pass. Every intermediate needed by the reverse pass or by the
//! attention re-run path is cached per position.

use super::math::{add_assign, dot, layer_norm, matvec, silu, softmax};
use super::{ModelWeights, N_POS_EXTRA};

pub(crate) struct LnCache {
    pub y: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct LayerCache {
    /// Input to the block (before the attention residual).
    pub x_in: Vec<Vec<f64>>,
    pub ln1: LnCache,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Post-softmax attention, one flattened n x n matrix per head.
    /// Rows are queries; entries at k > j stay zero (causal mask).
    pub attn: Vec<Vec<f64>>,
    /// Concatenated head outputs (attention-weighted values).
    pub ho: Vec<Vec<f64>>,
    /// After the attention residual.
    pub x_mid: Vec<Vec<f64>>,
    pub ln2: LnCache,
    /// MLP pre-activation.
    pub u: Vec<Vec<f64>>,
    /// silu(u).
    pub s: Vec<Vec<f64>>,
    /// Block output.
    pub x_out: Vec<Vec<f64>>,
}

pub(crate) struct Cache {
    pub h0: Vec<Vec<f64>>,
    pub layers: Vec<LayerCache>,
    /// Final layer norm is evaluated at the last position only.
    pub lnf_mu: f64,
    pub lnf_rstd: f64,
    pub hl: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Cache {
    pub fn n_positions(&self) -> usize {
        self.h0.len()
    }
}

pub(crate) fn forward(w: &ModelWeights, h0: &[Vec<f64>]) -> Cache {
    let d = w.config.d_model;
    let n = h0.len();
    let mut x: Vec<Vec<f64>> = h0.to_vec();
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let x_in = x;
        let mut ln1 = LnCache {
            y: Vec::with_capacity(n),
            mu: Vec::with_capacity(n),
            rstd: Vec::with_capacity(n),
        };
        for xi in &x_in {
            let (y, mu, rstd) = layer_norm(xi, &lw.ln1_g, &lw.ln1_b);
            ln1.y.push(y);
            ln1.mu.push(mu);
            ln1.rstd.push(rstd);
        }
        let q: Vec<Vec<f64>> = ln1.y.iter().map(|y| matvec(&lw.wq, y, d, d)).collect();
        let k: Vec<Vec<f64>> = ln1.y.iter().map(|y| matvec(&lw.wk, y, d, d)).collect();
        let v: Vec<Vec<f64>> = ln1.y.iter().map(|y| matvec(&lw.wv, y, d, d)).collect();

        let (attn, ho) = attention(&q, &k, &v, w.config.n_heads, w.config.d_head());

        let mut x_mid = Vec::with_capacity(n);
        for (j, xi) in x_in.iter().enumerate() {
            let mut xm = matvec(&lw.wo, &ho[j], d, d);
            add_assign(&mut xm, xi);
            x_mid.push(xm);
        }

        let mut ln2 = LnCache {
            y: Vec::with_capacity(n),
            mu: Vec::with_capacity(n),
            rstd: Vec::with_capacity(n),
        };
        for xm in &x_mid {
            let (y, mu, rstd) = layer_norm(xm, &lw.ln2_g, &lw.ln2_b);
            ln2.y.push(y);
            ln2.mu.push(mu);
            ln2.rstd.push(rstd);
        }
        let d_ff = w.config.d_ff;
        let u: Vec<Vec<f64>> = ln2.y.iter().map(|y| matvec(&lw.w1, y, d_ff, d)).collect();
        let s: Vec<Vec<f64>> = u
            .iter()
            .map(|ui| ui.iter().map(|&t| silu(t)).collect())
            .collect();
        let mut x_out = Vec::with_capacity(n);
        for (j, xm) in x_mid.iter().enumerate() {
            let mut xo = matvec(&lw.w2, &s[j], d, d_ff);
            add_assign(&mut xo, xm);
            x_out.push(xo);
        }

        x = x_out.clone();
        layers.push(LayerCache {
            x_in,
            ln1,
            q,
            k,
            v,
            attn,
            ho,
            x_mid,
            ln2,
            u,
            s,
            x_out,
        });
    }

    let last = &x[n - 1];
    let (hl, lnf_mu, lnf_rstd) = layer_norm(last, &w.lnf_g, &w.lnf_b);
    let logits = head_logits(w, &hl);

    Cache {
        h0: h0.to_vec(),
        layers,
        lnf_mu,
        lnf_rstd,
        hl,
        logits,
    }
}

/// Causal multi-head attention over projected q/k/v. Returns the
/// post-softmax matrices (one per head) and the concatenated weighted
/// values per position.
#[allow(clippy::needless_range_loop)]
pub(crate) fn attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    n_heads: usize,
    d_head: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = q.len();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut attn = vec![vec![0.0; n * n]; n_heads];
    let mut ho = vec![vec![0.0; n_heads * d_head]; n];
    for h in 0..n_heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        for j in 0..n {
            let scores: Vec<f64> = (0..=j)
                .map(|t| dot(&q[j][lo..hi], &k[t][lo..hi]) * scale)
                .collect();
            let p = softmax(&scores);
            for (t, &pt) in p.iter().enumerate() {
                attn[h][j * n + t] = pt;
                for c in 0..d_head {
                    ho[j][lo + c] += pt * v[t][lo + c];
                }
            }
        }
    }
    (attn, ho)
}

pub(crate) fn head_logits(w: &ModelWeights, hl: &[f64]) -> Vec<f64> {
    matvec(&w.head, hl, w.labels.len(), w.config.d_model)
}

/// Re-runs the tail of the network with a substituted last-layer attention
/// tensor, holding every earlier activation at its cached value. Only the
/// final position feeds the logits after the last attention, so only that
/// position is recomputed.
#[allow(clippy::needless_range_loop)]
pub(crate) fn forward_from_last_attention(
    w: &ModelWeights,
    cache: &Cache,
    attn: &[Vec<f64>],
) -> Vec<f64> {
    let d = w.config.d_model;
    let d_head = w.config.d_head();
    let n = cache.n_positions();
    let li = w.layers.len() - 1;
    let lc = &cache.layers[li];
    let lw = &w.layers[li];
    let j = n - 1;

    let mut ho = vec![0.0; d];
    for h in 0..w.config.n_heads {
        let lo = h * d_head;
        for t in 0..n {
            let p = attn[h][j * n + t];
            for c in 0..d_head {
                ho[lo + c] += p * lc.v[t][lo + c];
            }
        }
    }
    let mut x_mid = matvec(&lw.wo, &ho, d, d);
    add_assign(&mut x_mid, &lc.x_in[j]);
    let (y2, _, _) = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b);
    let u = matvec(&lw.w1, &y2, w.config.d_ff, d);
    let s: Vec<f64> = u.iter().map(|&t| silu(t)).collect();
    let mut x_out = matvec(&lw.w2, &s, d, w.config.d_ff);
    add_assign(&mut x_out, &x_mid);
    let (hl, _, _) = layer_norm(&x_out, &w.lnf_g, &w.lnf_b);
    head_logits(w, &hl)
}

/// Number of positions the model consumes for a text of `n_tokens` tokens
/// (the trailing separator).
pub(crate) fn n_positions_for(n_tokens: usize) -> usize {
    n_tokens + N_POS_EXTRA
}
