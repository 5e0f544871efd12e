//! The three model-internal explanation methods, each reducing exact
//! gradients from the reference transformer to one saliency weight per
//! text token:
//!
//! * `agrad`: head-mean of gradient x attention at the last layer's
//!   final query row.
//! * `gradin`: gradient x input embedding, summed over embedding
//!   dimensions, absolute value.
//! * `igrad`: the minimum-norm input change that moves the output
//!   embedding toward an alternative label, via the SVD pseudoinverse of
//!   the output-input Jacobian; per-token Euclidean norms.
//!
//! The separator position participates in every forward and backward
//! pass but is not a text token, so it never receives saliency.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::tinylm::{ForwardTrace, ModelWeights};

/// Relative singular-value cutoff for the pseudoinverse: values below
/// `PINV_RTOL * sigma_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-8;

/// Attention-gradient saliency for the predicted label: for each text
/// token (key column), the mean over heads of gradient x attention at
/// the last layer's final query row.
pub fn agrad(weights: &ModelWeights, trace: &ForwardTrace) -> Result<SaliencyMap> {
    let d_attn = weights.grad_attention_last(trace, trace.predicted)?;
    let attn_last = trace
        .attentions
        .last()
        .ok_or_else(|| Error::Validation {
            id: String::new(),
            msg: "trace has no attention layers".into(),
        })?;
    let n = trace.n_positions();
    let raw = head_mean_product(&d_attn, attn_last, n, trace.seq.len());
    SaliencyMap::from_raw(trace.seq.tokens.clone(), raw, "agrad")
}

/// Mean over heads of `dA[h] * A[h]` at the final query row, for the
/// first `n_text` key columns. Flat buffers are n x n row-major.
fn head_mean_product(d_attn: &[Vec<f64>], attn: &[Vec<f64>], n: usize, n_text: usize) -> Vec<f64> {
    let heads = d_attn.len() as f64;
    let row = (n - 1) * n;
    (0..n_text)
        .map(|k| {
            d_attn
                .iter()
                .zip(attn)
                .map(|(g, a)| g[row + k] * a[row + k])
                .sum::<f64>()
                / heads
        })
        .collect()
}

/// Gradient-x-input saliency for the predicted label: the absolute value
/// of each text token's signed attribution (see [`gradin_raw`]).
pub fn gradin(weights: &ModelWeights, trace: &ForwardTrace) -> Result<SaliencyMap> {
    let raw = gradin_raw(weights, trace)?;
    SaliencyMap::from_raw(
        trace.seq.tokens.clone(),
        raw.into_iter().map(f64::abs).collect(),
        "gradin",
    )
}

/// Signed gradient-x-input attributions before the absolute value: for
/// each text token, the elementwise product of the predicted-label logit
/// gradient and the input embedding, summed over embedding dimensions.
/// These are the values whose per-text extrema feed the summary report.
pub fn gradin_raw(weights: &ModelWeights, trace: &ForwardTrace) -> Result<Vec<f64>> {
    let grads = weights.grad_input(trace, trace.predicted)?;
    Ok((0..trace.seq.len())
        .map(|i| signed_product_sum(&grads[i], &trace.input_embeddings[i]))
        .collect())
}

fn signed_product_sum(grad: &[f64], h0: &[f64]) -> f64 {
    grad.iter().zip(h0).map(|(g, x)| g * x).sum()
}

/// Inverse-gradient saliency: solves `J * delta = target` for the
/// minimum-norm input-embedding change, where `J` is the Jacobian of the
/// final output embedding w.r.t. all input embeddings and `target` is
/// the unit-normalized head-row difference (alternative minus predicted
/// label). Each text token's weight is the Euclidean norm of its
/// `d_model` slice of `delta`.
///
/// `alt_label` defaults to the second-most-probable label in the trace.
pub fn igrad(
    weights: &ModelWeights,
    trace: &ForwardTrace,
    alt_label: Option<usize>,
) -> Result<SaliencyMap> {
    let alt = match alt_label {
        Some(l) => l,
        None => second_best(&trace.logits)?,
    };
    if alt == trace.predicted {
        return Err(Error::InvalidTarget(format!(
            "alternative label {} equals the predicted label",
            alt
        )));
    }
    let mut target: Vec<f64> = weights
        .head_row(alt)?
        .iter()
        .zip(weights.head_row(trace.predicted)?)
        .map(|(a, p)| a - p)
        .collect();
    let norm = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidTarget(format!(
            "labels {} and {} have identical output directions",
            alt, trace.predicted
        )));
    }
    for x in &mut target {
        *x /= norm;
    }
    let jac = weights.jacobian(trace);
    let delta = pinv_solve(&jac, &target, PINV_RTOL)?;
    let d = weights.config.d_model;
    let raw = (0..trace.seq.len())
        .map(|i| delta[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    SaliencyMap::from_raw(trace.seq.tokens.clone(), raw, "igrad")
}

/// Index of the second-largest logit (ties break toward earlier labels).
pub fn second_best(logits: &[f64]) -> Result<usize> {
    if logits.len() < 2 {
        return Err(Error::InvalidTarget(
            "need at least two labels to pick an alternative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    Ok(order[1])
}

/// Minimum-norm least-squares solution of `m * x = b` via SVD, with
/// singular values below `rtol * sigma_max` treated as zero. `m` is
/// given as rows. Fails with a degenerate-Jacobian error when the matrix
/// has no usable singular value (all zero or non-finite).
pub fn pinv_solve(m: &[Vec<f64>], b: &[f64], rtol: f64) -> Result<Vec<f64>> {
    let nrows = m.len();
    let ncols = if nrows > 0 { m[0].len() } else { 0 };
    if nrows == 0 || ncols == 0 || b.len() != nrows {
        return Err(Error::DegenerateJacobian);
    }
    let mat = DMatrix::from_row_iterator(nrows, ncols, m.iter().flatten().copied());
    let svd = mat.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !sigma_max.is_finite() || sigma_max <= 0.0 {
        return Err(Error::DegenerateJacobian);
    }
    let rhs = DVector::from_column_slice(b);
    let x = svd
        .solve(&rhs, rtol * sigma_max)
        .map_err(|_| Error::DegenerateJacobian)?;
    Ok(x.iter().copied().collect())
}
