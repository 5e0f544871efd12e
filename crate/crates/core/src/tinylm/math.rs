//! Dense helpers for the reference model. Matrices are flat row-major
//! `Vec<f64>` with explicit dimensions at the call site.

pub(crate) const LN_EPS: f64 = 1e-5;

/// y = W x, W is out_dim x in_dim.
pub(crate) fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    let mut y = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
    y
}

/// x = W^T g, W is out_dim x in_dim, g has out_dim entries.
pub(crate) fn matvec_t(w: &[f64], g: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(g.len(), out_dim);
    let mut x = vec![0.0; in_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let go = g[o];
        for i in 0..in_dim {
            x[i] += row[i] * go;
        }
    }
    x
}

/// dW += g x^T (outer product accumulation).
pub(crate) fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let in_dim = x.len();
    debug_assert_eq!(dw.len(), g.len() * in_dim);
    for (o, &go) in g.iter().enumerate() {
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            row[i] += go * x[i];
        }
    }
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (ai, bi) in a.iter_mut().zip(b) {
        *ai += bi;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Layer norm with gain and bias. Returns (y, mu, rstd).
pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let y = x
        .iter()
        .zip(g.iter().zip(b))
        .map(|(&xi, (&gi, &bi))| (xi - mu) * rstd * gi + bi)
        .collect();
    (y, mu, rstd)
}

/// Gradient of layer norm w.r.t. its input. `dg`/`db` accumulate parameter
/// gradients when supplied.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    x: &[f64],
    mu: f64,
    rstd: f64,
    g: &[f64],
    mut dg: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    let mut dxhat = vec![0.0; n];
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let xhat = (x[i] - mu) * rstd;
        dxhat[i] = dy[i] * g[i];
        m1 += dxhat[i];
        m2 += dxhat[i] * xhat;
        if let Some(dg) = dg.as_deref_mut() {
            dg[i] += dy[i] * xhat;
        }
        if let Some(db) = db.as_deref_mut() {
            db[i] += dy[i];
        }
    }
    m1 /= nf;
    m2 /= nf;
    (0..n)
        .map(|i| {
            let xhat = (x[i] - mu) * rstd;
            rstd * (dxhat[i] - m1 - xhat * m2)
        })
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softmax over a slice.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
