//! Adam training of the reference classifier. Deterministic: identical
//! (config, corpus, epochs, lr) always produce bitwise-identical weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ce_loss_and_grad, LayerWeights, ModelConfig, ModelWeights};
use crate::corpus::{AnnotatedText, LabelSet, TokenSequence, Vocab};
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INIT_STD: f64 = 0.02;

pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean cross-entropy per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            v: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn init_weights(
    config: &ModelConfig,
    vocab: Vocab,
    labels: LabelSet,
    rng: &mut ChaCha8Rng,
) -> ModelWeights {
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let d = config.d_model;
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| normal.sample(rng)).collect()
    };
    let tok_emb = draw(vocab.len() * d);
    let pos_emb = draw(config.max_len * d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            wq: draw(d * d),
            wk: draw(d * d),
            wv: draw(d * d),
            wo: draw(d * d),
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w1: draw(config.d_ff * d),
            w2: draw(d * config.d_ff),
        })
        .collect();
    let head = draw(labels.len() * d);
    ModelWeights {
        config: config.clone(),
        vocab,
        labels,
        tok_emb,
        pos_emb,
        layers,
        lnf_g: vec![1.0; d],
        lnf_b: vec![0.0; d],
        head,
    }
}

/// Trains a classifier on an annotated corpus. The vocabulary is built
/// from the corpus; `epochs == 0` returns the seeded initialization
/// unchanged. A non-finite epoch loss aborts with the offending epoch.
pub fn train(
    corpus: &[AnnotatedText],
    labels: &LabelSet,
    config: &ModelConfig,
    epochs: usize,
    lr: f64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }

    let mut targets = Vec::with_capacity(corpus.len());
    for t in corpus {
        match labels.index_of(&t.label) {
            Some(i) => targets.push(i),
            None => {
                return Err(Error::Validation {
                    id: t.id.clone(),
                    msg: format!("label {:?} not in label set", t.label),
                })
            }
        }
    }

    let vocab = Vocab::build(corpus, labels);
    let sequences: Vec<TokenSequence> =
        corpus.iter().map(|t| vocab.tokenize(&t.text)).collect();
    for (t, seq) in corpus.iter().zip(&sequences) {
        let n = seq.len() + super::N_POS_EXTRA;
        if n > config.max_len {
            return Err(Error::Validation {
                id: t.id.clone(),
                msg: format!(
                    "needs {n} positions but max_len is {}",
                    config.max_len
                ),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = init_weights(config, vocab, labels.clone(), &mut rng);

    let shapes: Vec<usize> = weights.params_mut().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let seq = &sequences[i];
            let h0 = weights.embed(seq)?;
            let cache = weights.forward_cache(&h0);
            let (loss, d_logits) = ce_loss_and_grad(&cache.logits, targets[i]);
            loss_sum += loss;
            let mut ids: Vec<u32> = seq.ids.clone();
            ids.push(crate::corpus::SEP_ID);
            let grads = weights.backward_training(&cache, &d_logits, &ids);
            adam.step(weights.params_mut(), grads.params(), lr);
        }
        let mean = loss_sum / corpus.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        epoch_losses.push(mean);
    }

    Ok(TrainOutcome {
        weights,
        epoch_losses,
    })
}

/// Accuracy of the model on an annotated corpus.
pub fn evaluate(weights: &ModelWeights, corpus: &[AnnotatedText]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Config("evaluation corpus is empty".into()));
    }
    let mut correct = 0usize;
    for t in corpus {
        let trace = weights.classify_text(&t.text)?;
        if weights.labels.get(trace.predicted) == t.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}
