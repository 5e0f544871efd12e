//! Finite-difference oracles for the exact gradients. The oracle path
//! uses only the re-run forward APIs (`logits_from_embeddings`,
//! `logits_with_last_attention`); the analytic path is the reverse pass.
//! The two never share intermediate state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xplain_core::corpus::{gen_synthetic, Task};
use xplain_core::tinylm::{train, ModelConfig, ModelWeights};

const FD_STEP: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn tiny_model(d: usize, layers: usize, heads: usize, seed: u64) -> ModelWeights {
    let corpus = gen_synthetic(Task::Hazard, 16, seed);
    let labels = Task::Hazard.label_set();
    let config = ModelConfig::new(d, layers, heads, seed);
    // One epoch moves the weights off their symmetric init without
    // costing time; gradients are checked wherever the weights land.
    train(&corpus, &labels, &config, 1, 0.01)
        .unwrap()
        .weights
}

/// Central finite difference of the target logit w.r.t. one input
/// embedding coordinate.
fn fd_grad_input(
    model: &ModelWeights,
    h0: &[Vec<f64>],
    pos: usize,
    coord: usize,
    target: usize,
) -> f64 {
    let mut plus = h0.to_vec();
    let mut minus = h0.to_vec();
    plus[pos][coord] += FD_STEP;
    minus[pos][coord] -= FD_STEP;
    let (_, lp) = model.logits_from_embeddings(&plus);
    let (_, lm) = model.logits_from_embeddings(&minus);
    (lp[target] - lm[target]) / (2.0 * FD_STEP)
}

#[test]
fn grad_input_matches_finite_differences() {
    let model = tiny_model(16, 2, 4, 31);
    let text = "acme recalls cheese after salmonella found in batches";
    let trace = model.classify_text(text).unwrap();
    let target = trace.predicted;
    let analytic = model.grad_input(&trace, target).unwrap();
    let h0 = trace.input_embeddings.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = h0.len();
    let d = model.config.d_model;
    for _ in 0..120 {
        let pos = rng.gen_range(0..n);
        let coord = rng.gen_range(0..d);
        let fd = fd_grad_input(&model, &h0, pos, coord, target);
        let an = analytic[pos][coord];
        assert!(
            rel_err(fd, an) < 1e-4,
            "grad_input[{pos}][{coord}]: fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn grad_attention_matches_finite_differences() {
    let model = tiny_model(16, 2, 4, 47);
    let text = "bluepeak issues recall of juice because of mercury";
    let trace = model.classify_text(text).unwrap();
    let target = trace.predicted;
    let analytic = model.grad_attention_last(&trace, target).unwrap();
    let base_attn = trace.attentions.last().unwrap().clone();
    let n = trace.n_positions();
    let j = n - 1;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..120 {
        let h = rng.gen_range(0..model.config.n_heads);
        let k = rng.gen_range(0..n);
        let mut plus = base_attn.clone();
        let mut minus = base_attn.clone();
        plus[h][j * n + k] += FD_STEP;
        minus[h][j * n + k] -= FD_STEP;
        let lp = model.logits_with_last_attention(&trace, &plus).unwrap();
        let lm = model.logits_with_last_attention(&trace, &minus).unwrap();
        let fd = (lp[target] - lm[target]) / (2.0 * FD_STEP);
        let an = analytic[h][j * n + k];
        assert!(
            rel_err(fd, an) < 1e-4,
            "grad_attn[{h}][{j},{k}]: fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn grad_attention_off_final_row_has_no_effect_and_zero_gradient() {
    let model = tiny_model(12, 2, 3, 53);
    let trace = model.classify_text("sunrow recalled flour due to glass").unwrap();
    let analytic = model.grad_attention_last(&trace, trace.predicted).unwrap();
    let base_attn = trace.attentions.last().unwrap().clone();
    let n = trace.n_positions();
    // Perturbing a non-final query row leaves the logits untouched, and
    // the reported gradient there is exactly zero.
    for j in 0..n - 1 {
        let mut bumped = base_attn.clone();
        bumped[0][j * n] += 0.25;
        let logits = model.logits_with_last_attention(&trace, &bumped).unwrap();
        assert_eq!(logits, trace.logits, "row {j} influenced the logits");
        assert_eq!(analytic[0][j * n], 0.0);
    }
}

#[test]
fn jacobian_directional_derivative_matches_forward_difference() {
    let model = tiny_model(16, 2, 4, 61);
    let trace = model
        .classify_text("harvestco recalls lentils after plastic found in batches")
        .unwrap();
    let jac = model.jacobian(&trace);
    let h0 = trace.input_embeddings.clone();
    let n = h0.len();
    let d = model.config.d_model;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm: f64 = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = 1e-5 / norm;
    let delta: Vec<f64> = delta.into_iter().map(|x| x * scale).collect();

    let mut bumped = h0.clone();
    for pos in 0..n {
        for c in 0..d {
            bumped[pos][c] += delta[pos * d + c];
        }
    }
    let (hl_base, _) = model.logits_from_embeddings(&h0);
    let (hl_bump, _) = model.logits_from_embeddings(&bumped);

    for r in 0..d {
        let predicted: f64 = jac[r]
            .iter()
            .zip(&delta)
            .map(|(j, dx)| j * dx)
            .sum();
        let observed = hl_bump[r] - hl_base[r];
        assert!(
            rel_err(predicted, observed) < 1e-3
                || (predicted.abs() < 1e-12 && observed.abs() < 1e-12),
            "row {r}: J delta {predicted} vs forward diff {observed}"
        );
    }
}

#[test]
fn gradient_through_embeddings_reaches_every_position() {
    let model = tiny_model(16, 2, 4, 71);
    let trace = model
        .classify_text("goldenvale recalled spinach due to listeria")
        .unwrap();
    let g = model.grad_input(&trace, trace.predicted).unwrap();
    for (pos, row) in g.iter().enumerate() {
        assert!(
            row.iter().any(|&v| v != 0.0),
            "position {pos} has an all-zero gradient"
        );
    }
}
