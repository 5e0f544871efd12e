//! Reference classifier: a small decoder-only transformer trained to
//! predict the label token that follows a text and a separator. All
//! arithmetic is f64 and every gradient is exact reverse-mode, so the
//! model is fully introspectable: attention tensors, input-embedding
//! gradients, last-layer attention gradients, and the full Jacobian of
//! the output embedding w.r.t. the input embeddings are all available.

mod backward;
mod forward;
mod math;
mod train;

pub use train::{evaluate, train, TrainOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, TokenSequence, Vocab, SEP_ID};
use crate::error::{Error, Result};

pub(crate) const N_POS_EXTRA: usize = 1; // trailing separator

const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters. `d_model` must be divisible by
/// `n_heads`; the per-head width is derived. `seed` drives weight
/// initialization and epoch shuffling, making training bitwise
/// deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Convention: 4x MLP width, room for 64 positions.
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, seed: u64) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            max_len: 64,
            seed,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "model dimensions must all be at least 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(
                "max_len must fit at least one token plus the separator".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct LayerWeights {
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

/// Trained model: config, vocabulary, label set, and all parameter
/// tensors. The classification head holds one unembedding row per label
/// token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub(crate) tok_emb: Vec<f64>,
    pub(crate) pos_emb: Vec<f64>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) lnf_g: Vec<f64>,
    pub(crate) lnf_b: Vec<f64>,
    pub(crate) head: Vec<f64>,
}

/// Everything a forward pass exposes for one classification: the traced
/// activations explanation methods read, plus the decision itself.
pub struct ForwardTrace {
    /// The text's tokens (the separator is not part of the sequence).
    pub seq: TokenSequence,
    /// Input embeddings per model position (text tokens then separator):
    /// token embedding + position embedding.
    pub input_embeddings: Vec<Vec<f64>>,
    /// Post-softmax attention per layer and head, flattened n x n
    /// row-major (query row j, key column k). Causally masked entries are
    /// zero; each unmasked row sums to 1.
    pub attentions: Vec<Vec<Vec<f64>>>,
    /// Final-position output embedding h^L (after the final layer norm).
    pub output_embedding: Vec<f64>,
    /// Per-label scores.
    pub logits: Vec<f64>,
    /// Argmax label index; ties break toward the earlier label.
    pub predicted: usize,
    cache: forward::Cache,
}

impl ForwardTrace {
    pub fn n_positions(&self) -> usize {
        self.input_embeddings.len()
    }

    pub fn predicted_label<'a>(&self, labels: &'a LabelSet) -> &'a str {
        labels.get(self.predicted)
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl ModelWeights {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Embeds a token sequence plus the trailing separator.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        if seq.vocab_id != self.vocab.id() {
            return Err(Error::VocabMismatch {
                expected: self.vocab.id().to_string(),
                found: seq.vocab_id.clone(),
            });
        }
        let n = forward::n_positions_for(seq.len());
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let d = self.config.d_model;
        let mut h0 = Vec::with_capacity(n);
        for (j, &id) in seq.ids.iter().chain(std::iter::once(&SEP_ID)).enumerate() {
            let row = &self.tok_emb[id as usize * d..(id as usize + 1) * d];
            let pos = &self.pos_emb[j * d..(j + 1) * d];
            h0.push(row.iter().zip(pos).map(|(a, b)| a + b).collect());
        }
        Ok(h0)
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text)
    }

    /// Runs the model on a tokenized text and returns the full trace.
    pub fn classify(&self, seq: &TokenSequence) -> Result<ForwardTrace> {
        let h0 = self.embed(seq)?;
        let cache = forward::forward(self, &h0);
        let attentions = cache
            .layers
            .iter()
            .map(|l| l.attn.clone())
            .collect::<Vec<_>>();
        Ok(ForwardTrace {
            seq: seq.clone(),
            input_embeddings: cache.h0.clone(),
            attentions,
            output_embedding: cache.hl.clone(),
            logits: cache.logits.clone(),
            predicted: argmax_first(&cache.logits),
            cache,
        })
    }

    pub fn classify_text(&self, text: &str) -> Result<ForwardTrace> {
        self.classify(&self.tokenize(text))
    }

    /// Forward pass from explicit input embeddings (text positions plus
    /// separator). Returns the final-position output embedding and the
    /// logits. This is the re-run path finite-difference oracles and
    /// directional checks use; it shares no state with the reverse pass.
    pub fn logits_from_embeddings(&self, h0: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let cache = forward::forward(self, h0);
        (cache.hl, cache.logits)
    }

    /// Re-runs the tail of the network with a substituted last-layer
    /// post-softmax attention tensor (one flattened n x n matrix per
    /// head), holding all earlier activations at their traced values.
    pub fn logits_with_last_attention(
        &self,
        trace: &ForwardTrace,
        attn: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let n = trace.n_positions();
        if attn.len() != self.config.n_heads
            || attn.iter().any(|a| a.len() != n * n)
        {
            return Err(Error::InvalidTarget(format!(
                "attention tensor must be {} heads of {}x{n}",
                self.config.n_heads, n
            )));
        }
        Ok(forward::forward_from_last_attention(self, &trace.cache, attn))
    }

    fn check_label(&self, target: usize) -> Result<()> {
        if target >= self.labels.len() {
            return Err(Error::InvalidTarget(format!(
                "label index {target} out of range ({} labels)",
                self.labels.len()
            )));
        }
        Ok(())
    }

    /// The output-space direction for a label: the head row whose inner
    /// product with the output embedding is that label's logit.
    pub fn head_row(&self, label: usize) -> Result<Vec<f64>> {
        self.check_label(label)?;
        Ok(backward::head_row(self, label))
    }

    /// Exact gradient of the target label's logit w.r.t. every input
    /// embedding (one d_model vector per position, separator included).
    pub fn grad_input(&self, trace: &ForwardTrace, target: usize) -> Result<Vec<Vec<f64>>> {
        self.check_label(target)?;
        let seed = backward::head_row(self, target);
        let out = backward::backward(
            self,
            &trace.cache,
            backward::Seed::Output(&seed),
            None,
            false,
        );
        Ok(out.d_h0)
    }

    /// Exact gradient of the target label's logit w.r.t. the last layer's
    /// post-softmax attention entries, treated as free variables at their
    /// traced values. Entries off the final query row, and causally
    /// masked entries, are zero: they cannot influence the final-position
    /// logit once the earlier layers are held fixed.
    pub fn grad_attention_last(
        &self,
        trace: &ForwardTrace,
        target: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_label(target)?;
        let seed = backward::head_row(self, target);
        let out = backward::backward(
            self,
            &trace.cache,
            backward::Seed::Output(&seed),
            None,
            false,
        );
        Ok(out.d_attn_last)
    }

    /// Jacobian of the final-position output embedding w.r.t. all input
    /// embeddings: d_model rows, n * d_model columns (position-major).
    /// Row r is the input gradient of output component r, assembled from
    /// d_model reverse passes.
    pub fn jacobian(&self, trace: &ForwardTrace) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        let n = trace.n_positions();
        let mut rows = Vec::with_capacity(d);
        let mut seed = vec![0.0; d];
        for r in 0..d {
            seed[r] = 1.0;
            let out = backward::backward(
                self,
                &trace.cache,
                backward::Seed::Output(&seed),
                None,
                false,
            );
            seed[r] = 0.0;
            let mut row = Vec::with_capacity(n * d);
            for pos in out.d_h0 {
                row.extend(pos);
            }
            rows.push(row);
        }
        rows
    }

    /// Writes a versioned JSON checkpoint (config header, vocabulary,
    /// labels, all tensors). f64 values round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let checkpoint = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(file, &checkpoint)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let checkpoint: CheckpointFile =
            serde_json::from_reader(std::io::BufReader::new(file))
                .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if checkpoint.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                checkpoint.format_version
            )));
        }
        let m = checkpoint.model;
        m.validate_shapes()?;
        Ok(m)
    }

    fn validate_shapes(&self) -> Result<()> {
        self.config.validate().map_err(|e| {
            Error::Checkpoint(format!("invalid config in checkpoint: {e}"))
        })?;
        let d = self.config.d_model;
        let checks: [(&str, usize, usize); 5] = [
            ("tok_emb", self.tok_emb.len(), self.vocab.len() * d),
            ("pos_emb", self.pos_emb.len(), self.config.max_len * d),
            ("lnf_g", self.lnf_g.len(), d),
            ("lnf_b", self.lnf_b.len(), d),
            ("head", self.head.len(), self.labels.len() * d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has {got} values, config implies {want}"
                )));
            }
        }
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Checkpoint(format!(
                "{} layer blocks, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let shapes: [(&str, usize, usize); 10] = [
                ("ln1_g", l.ln1_g.len(), d),
                ("ln1_b", l.ln1_b.len(), d),
                ("wq", l.wq.len(), d * d),
                ("wk", l.wk.len(), d * d),
                ("wv", l.wv.len(), d * d),
                ("wo", l.wo.len(), d * d),
                ("ln2_g", l.ln2_g.len(), d),
                ("ln2_b", l.ln2_b.len(), d),
                ("w1", l.w1.len(), self.config.d_ff * d),
                ("w2", l.w2.len(), d * self.config.d_ff),
            ];
            for (name, got, want) in shapes {
                if got != want {
                    return Err(Error::Checkpoint(format!(
                        "layer {i} tensor {name} has {got} values, config implies {want}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// All parameter tensors in canonical order (shared with the
    /// optimizer and the gradient structs).
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.push(&mut l.ln1_g);
            v.push(&mut l.ln1_b);
            v.push(&mut l.wq);
            v.push(&mut l.wk);
            v.push(&mut l.wv);
            v.push(&mut l.wo);
            v.push(&mut l.ln2_g);
            v.push(&mut l.ln2_b);
            v.push(&mut l.w1);
            v.push(&mut l.w2);
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v.push(&mut self.head);
        v
    }

    pub(crate) fn forward_cache(&self, h0: &[Vec<f64>]) -> forward::Cache {
        forward::forward(self, h0)
    }

    pub(crate) fn backward_training(
        &self,
        cache: &forward::Cache,
        d_logits: &[f64],
        token_ids: &[u32],
    ) -> backward::WeightGrads {
        backward::backward(
            self,
            cache,
            backward::Seed::Logits(d_logits),
            Some(token_ids),
            true,
        )
        .grads
        .expect("gradients requested")
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    model: ModelWeights,
}

pub(crate) use backward::ce_loss_and_grad;
