//! Exact reverse-mode differentiation through the cached forward pass.
//! One engine serves training (weight gradients from a logit-space seed)
//! and explanation (input and attention gradients from an
//! output-embedding seed).

use super::forward::Cache;
use super::math::{add_assign, layer_norm_backward, matvec_t, outer_acc, silu_prime};
use super::ModelWeights;

/// Where the reverse pass starts.
pub(crate) enum Seed<'a> {
    /// d(loss)/d(logits); implies gradients through the head weights.
    Logits(&'a [f64]),
    /// d(scalar)/d(h^L), the final-position output embedding.
    Output(&'a [f64]),
}

/// Per-tensor gradients, same shapes and order as the model tensors.
pub(crate) struct WeightGrads {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerGrads>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head: Vec<f64>,
}

pub(crate) struct LayerGrads {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl WeightGrads {
    fn zeros_like(w: &ModelWeights) -> Self {
        WeightGrads {
            tok_emb: vec![0.0; w.tok_emb.len()],
            pos_emb: vec![0.0; w.pos_emb.len()],
            layers: w
                .layers
                .iter()
                .map(|l| LayerGrads {
                    ln1_g: vec![0.0; l.ln1_g.len()],
                    ln1_b: vec![0.0; l.ln1_b.len()],
                    wq: vec![0.0; l.wq.len()],
                    wk: vec![0.0; l.wk.len()],
                    wv: vec![0.0; l.wv.len()],
                    wo: vec![0.0; l.wo.len()],
                    ln2_g: vec![0.0; l.ln2_g.len()],
                    ln2_b: vec![0.0; l.ln2_b.len()],
                    w1: vec![0.0; l.w1.len()],
                    w2: vec![0.0; l.w2.len()],
                })
                .collect(),
            lnf_g: vec![0.0; w.lnf_g.len()],
            lnf_b: vec![0.0; w.lnf_b.len()],
            head: vec![0.0; w.head.len()],
        }
    }

    /// Tensors in the canonical parameter order (matches
    /// [`ModelWeights::params_mut`]).
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b,
                &l.w1, &l.w2,
            ]);
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.head]);
        v
    }
}

pub(crate) struct BackwardOut {
    /// Gradient w.r.t. the input embeddings, one vector per position.
    pub d_h0: Vec<Vec<f64>>,
    /// Gradient w.r.t. the last layer's post-softmax attention entries,
    /// treated as free variables at their traced values. One flattened
    /// n x n matrix per head; rows other than the final query and causally
    /// masked columns are exactly zero.
    pub d_attn_last: Vec<Vec<f64>>,
    pub grads: Option<WeightGrads>,
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn backward(
    w: &ModelWeights,
    cache: &Cache,
    seed: Seed,
    token_ids: Option<&[u32]>,
    want_grads: bool,
) -> BackwardOut {
    let d = w.config.d_model;
    let d_ff = w.config.d_ff;
    let n_heads = w.config.n_heads;
    let d_head = w.config.d_head();
    let n = cache.n_positions();
    let last = n - 1;

    let mut grads = want_grads.then(|| WeightGrads::zeros_like(w));

    // Seed the gradient at the final-position output embedding.
    let d_hl: Vec<f64> = match seed {
        Seed::Output(v) => {
            debug_assert_eq!(v.len(), d);
            v.to_vec()
        }
        Seed::Logits(dl) => {
            debug_assert_eq!(dl.len(), w.labels.len());
            if let Some(g) = grads.as_mut() {
                outer_acc(&mut g.head, dl, &cache.hl);
            }
            matvec_t(&w.head, dl, w.labels.len(), d)
        }
    };

    // Final layer norm (applied at the last position only).
    let x_last = &cache.layers[w.layers.len() - 1].x_out[last];
    let d_last = {
        let (dg, db) = match grads.as_mut() {
            Some(g) => (Some(&mut g.lnf_g[..]), Some(&mut g.lnf_b[..])),
            None => (None, None),
        };
        layer_norm_backward(
            &d_hl,
            x_last,
            cache.lnf_mu,
            cache.lnf_rstd,
            &w.lnf_g,
            dg,
            db,
        )
    };

    let mut d_x: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    d_x[last] = d_last;

    let mut d_attn_last: Vec<Vec<f64>> = vec![vec![0.0; n * n]; n_heads];

    for (li, (lw, lc)) in w.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = grads.as_mut().map(|g| &mut g.layers[li]);
        // Feed-forward sublayer: x_out = x_mid + W2 silu(W1 ln2(x_mid)).
        let mut d_x_mid: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut lg = lg;
        for j in 0..n {
            let d_out = &d_x[j];
            let d_s = matvec_t(&lw.w2, d_out, d, d_ff);
            if let Some(lg) = lg.as_deref_mut() {
                outer_acc(&mut lg.w2, d_out, &lc.s[j]);
            }
            let d_u: Vec<f64> = d_s
                .iter()
                .zip(&lc.u[j])
                .map(|(&ds, &u)| ds * silu_prime(u))
                .collect();
            let d_y2 = matvec_t(&lw.w1, &d_u, d_ff, d);
            if let Some(lg) = lg.as_deref_mut() {
                outer_acc(&mut lg.w1, &d_u, &lc.ln2.y[j]);
            }
            let (dg2, db2) = match lg.as_deref_mut() {
                Some(lg) => (Some(&mut lg.ln2_g[..]), Some(&mut lg.ln2_b[..])),
                None => (None, None),
            };
            let mut dm = layer_norm_backward(
                &d_y2,
                &lc.x_mid[j],
                lc.ln2.mu[j],
                lc.ln2.rstd[j],
                &lw.ln2_g,
                dg2,
                db2,
            );
            add_assign(&mut dm, d_out); // residual
            d_x_mid.push(dm);
        }

        // Attention sublayer: x_mid = x_in + Wo ho.
        let mut d_ho: Vec<Vec<f64>> = Vec::with_capacity(n);
        for j in 0..n {
            d_ho.push(matvec_t(&lw.wo, &d_x_mid[j], d, d));
            if let Some(lg) = lg.as_deref_mut() {
                outer_acc(&mut lg.wo, &d_x_mid[j], &lc.ho[j]);
            }
        }

        let mut d_q: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut d_k: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut d_v: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let scale = 1.0 / (d_head as f64).sqrt();
        for h in 0..n_heads {
            let lo = h * d_head;
            let hi = lo + d_head;
            let a = &lc.attn[h];
            for j in 0..n {
                // d ho[j]_h / d A[j,t] = v[t]_h ; d/d v[t]_h = A[j,t].
                let mut d_a_row = vec![0.0; j + 1];
                for (t, dat) in d_a_row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..d_head {
                        acc += d_ho[j][lo + c] * lc.v[t][lo + c];
                    }
                    *dat = acc;
                    let ajt = a[j * n + t];
                    for c in 0..d_head {
                        d_v[t][lo + c] += ajt * d_ho[j][lo + c];
                    }
                }
                if li == w.layers.len() - 1 {
                    for (t, &dat) in d_a_row.iter().enumerate() {
                        d_attn_last[h][j * n + t] = dat;
                    }
                }
                // Softmax backward over the causal row.
                let row = &a[j * n..j * n + j + 1];
                let pivot: f64 = row.iter().zip(&d_a_row).map(|(&p, &g)| p * g).sum();
                for t in 0..=j {
                    let ds = row[t] * (d_a_row[t] - pivot) * scale;
                    for c in lo..hi {
                        d_q[j][c] += ds * lc.k[t][c];
                        d_k[t][c] += ds * lc.q[j][c];
                    }
                }
            }
        }

        for j in 0..n {
            let mut d_y1 = matvec_t(&lw.wq, &d_q[j], d, d);
            add_assign(&mut d_y1, &matvec_t(&lw.wk, &d_k[j], d, d));
            add_assign(&mut d_y1, &matvec_t(&lw.wv, &d_v[j], d, d));
            if let Some(lg) = lg.as_deref_mut() {
                outer_acc(&mut lg.wq, &d_q[j], &lc.ln1.y[j]);
                outer_acc(&mut lg.wk, &d_k[j], &lc.ln1.y[j]);
                outer_acc(&mut lg.wv, &d_v[j], &lc.ln1.y[j]);
            }
            let (dg1, db1) = match lg.as_deref_mut() {
                Some(lg) => (Some(&mut lg.ln1_g[..]), Some(&mut lg.ln1_b[..])),
                None => (None, None),
            };
            let mut dx = layer_norm_backward(
                &d_y1,
                &lc.x_in[j],
                lc.ln1.mu[j],
                lc.ln1.rstd[j],
                &lw.ln1_g,
                dg1,
                db1,
            );
            add_assign(&mut dx, &d_x_mid[j]); // residual
            d_x[j] = dx;
        }
    }

    if let (Some(g), Some(ids)) = (grads.as_mut(), token_ids) {
        for (j, dh) in d_x.iter().enumerate() {
            let id = ids[j] as usize;
            add_assign(&mut g.tok_emb[id * d..(id + 1) * d], dh);
            add_assign(&mut g.pos_emb[j * d..(j + 1) * d], dh);
        }
    }

    BackwardOut {
        d_h0: d_x,
        d_attn_last,
        grads,
    }
}

/// Row of the classification head for one label: the gradient of that
/// label's logit w.r.t. the output embedding.
pub(crate) fn head_row(w: &ModelWeights, label: usize) -> Vec<f64> {
    let d = w.config.d_model;
    w.head[label * d..(label + 1) * d].to_vec()
}

/// Cross-entropy loss and logit gradient for one sample.
pub(crate) fn ce_loss_and_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let p = super::math::softmax(logits);
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let mut d = p;
    d[target] -= 1.0;
    (loss, d)
}
