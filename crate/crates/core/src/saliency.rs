//! Token saliency maps and the conversions that bring every explanation
//! form (human spans, extracted phrases, counterfactuals, random
//! baselines) into the same comparable shape, plus per-text Pearson
//! correlation between maps.
//!
//! Every map is normalized: raw weights are floored at [`WEIGHT_FLOOR`]
//! (so no weight is ever zero or negative) and divided by their sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{split_tokens, TokenSequence};
use crate::error::{Error, Result};
use crate::seqmatch::lcs_pairs;

pub const WEIGHT_FLOOR: f64 = 1e-9;

/// Per-token attribution over a text's tokens. `method` names the
/// producing method (e.g. "human", "agrad", "self_extractive").
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub method: String,
    pub normalized: bool,
}

impl SaliencyMap {
    /// Builds a normalized map from raw importance values. Negative,
    /// zero, and non-finite raw values are floored to [`WEIGHT_FLOOR`]
    /// before normalization.
    pub fn from_raw(tokens: Vec<String>, raw: Vec<f64>, method: &str) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        if tokens.len() != raw.len() {
            return Err(Error::MapLengthMismatch {
                a: tokens.len(),
                b: raw.len(),
            });
        }
        let floored: Vec<f64> = raw
            .into_iter()
            .map(|w| if w.is_finite() && w > WEIGHT_FLOOR { w } else { WEIGHT_FLOOR })
            .collect();
        let sum: f64 = floored.iter().sum();
        let weights = floored.into_iter().map(|w| w / sum).collect();
        Ok(SaliencyMap {
            tokens,
            weights,
            method: method.to_string(),
            normalized: true,
        })
    }

    /// Rehydrates a map whose weights are already normalized, such as one
    /// read back from a report CSV. The weights are kept bit for bit so
    /// downstream reruns reproduce the original outputs exactly; they must
    /// be positive, finite, and sum to 1 within 1e-9.
    pub fn from_normalized(tokens: Vec<String>, weights: Vec<f64>, method: &str) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        if tokens.len() != weights.len() {
            return Err(Error::MapLengthMismatch {
                a: tokens.len(),
                b: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Validation {
                id: method.to_string(),
                msg: "saliency weights must be positive and finite".into(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation {
                id: method.to_string(),
                msg: format!("saliency weights sum to {sum}, expected 1"),
            });
        }
        Ok(SaliencyMap {
            tokens,
            weights,
            method: method.to_string(),
            normalized: true,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when every weight is identical (e.g. an all-floor fallback
    /// map). Such maps have no variance and are excluded from
    /// correlations.
    pub fn is_constant(&self) -> bool {
        self.weights.windows(2).all(|w| w[0] == w[1])
    }
}

/// Character-overlap conversion: a token is salient iff its character
/// range overlaps any annotated span.
pub fn spans_to_saliency(seq: &TokenSequence, spans: &[(usize, usize)]) -> Result<SaliencyMap> {
    let raw = seq
        .offsets
        .iter()
        .map(|&(ts, te)| {
            let covered = spans.iter().any(|&(s, e)| ts < e && s < te);
            if covered {
                1.0
            } else {
                WEIGHT_FLOOR
            }
        })
        .collect();
    SaliencyMap::from_raw(seq.tokens.clone(), raw, "human")
}

/// How one requested phrase was located in the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PhraseMatch {
    /// Case-insensitive substring of the raw text; char range recorded.
    Exact { start: usize, end: usize },
    /// Matched as a consecutive token run after whitespace/punctuation
    /// normalization; token index range recorded (inclusive).
    TokenRun { first: usize, last: usize },
    NotFound,
}

/// Marks tokens covered by the first occurrence of each phrase. Lookup is
/// case-insensitive; a token-run match normalizes whitespace differences.
/// Phrases that cannot be located contribute nothing and are flagged.
pub fn phrases_to_saliency(
    seq: &TokenSequence,
    phrases: &[String],
) -> Result<(SaliencyMap, Vec<PhraseMatch>)> {
    if seq.is_empty() {
        return Err(Error::EmptyTokenSequence);
    }
    let mut raw = vec![WEIGHT_FLOOR; seq.len()];
    let mut matches = Vec::with_capacity(phrases.len());
    for phrase in phrases {
        let m = locate_phrase(seq, phrase);
        match &m {
            PhraseMatch::Exact { start, end } => {
                for (i, &(ts, te)) in seq.offsets.iter().enumerate() {
                    if ts < *end && *start < te {
                        raw[i] = 1.0;
                    }
                }
            }
            PhraseMatch::TokenRun { first, last } => {
                for w in raw.iter_mut().take(*last + 1).skip(*first) {
                    *w = 1.0;
                }
            }
            PhraseMatch::NotFound => {}
        }
        matches.push(m);
    }
    let map = SaliencyMap::from_raw(seq.tokens.clone(), raw, "self_extractive")?;
    Ok((map, matches))
}

fn locate_phrase(seq: &TokenSequence, phrase: &str) -> PhraseMatch {
    let phrase = phrase.trim();
    if phrase.is_empty() {
        return PhraseMatch::NotFound;
    }
    // Stage 1: first case-insensitive occurrence in the raw text.
    // Per-char lowercasing keeps character indices aligned whenever the
    // lowercased text has the same length, which holds for the corpora
    // this toolkit handles; otherwise the token-run stage applies.
    let text_lower: Vec<char> = seq.text.to_lowercase().chars().collect();
    let phrase_lower: Vec<char> = phrase.to_lowercase().chars().collect();
    if text_lower.len() == seq.text.chars().count() && !phrase_lower.is_empty() {
        let n = text_lower.len();
        let m = phrase_lower.len();
        if m <= n {
            for start in 0..=n - m {
                if text_lower[start..start + m] == phrase_lower[..] {
                    return PhraseMatch::Exact {
                        start,
                        end: start + m,
                    };
                }
            }
        }
    }
    // Stage 2: first consecutive token-run match (normalizes whitespace
    // and spacing around punctuation).
    let phrase_tokens: Vec<String> = split_tokens(phrase).into_iter().map(|(t, _)| t).collect();
    if !phrase_tokens.is_empty() && phrase_tokens.len() <= seq.len() {
        for first in 0..=seq.len() - phrase_tokens.len() {
            if seq.tokens[first..first + phrase_tokens.len()] == phrase_tokens[..] {
                return PhraseMatch::TokenRun {
                    first,
                    last: first + phrase_tokens.len() - 1,
                };
            }
        }
    }
    PhraseMatch::NotFound
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CfStats {
    /// Original tokens not aligned to the counterfactual (i.e. changed or
    /// deleted).
    pub changed: usize,
    /// Counterfactual tokens not aligned to the original.
    pub inserted: usize,
}

/// Aligns original and counterfactual tokens by longest common
/// subsequence; original tokens outside the alignment (changed by the
/// counterfactual) get weight 1, aligned tokens get the floor. An
/// unchanged counterfactual therefore yields a uniform floor map.
pub fn counterfactual_to_saliency(
    seq: &TokenSequence,
    counterfactual: &str,
) -> Result<(SaliencyMap, CfStats)> {
    if seq.is_empty() {
        return Err(Error::EmptyTokenSequence);
    }
    let cf_tokens: Vec<String> = split_tokens(counterfactual)
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    let pairs = lcs_pairs(&seq.tokens, &cf_tokens);
    let mut raw = vec![1.0; seq.len()];
    for &(i, _) in &pairs {
        raw[i] = WEIGHT_FLOOR;
    }
    let stats = CfStats {
        changed: seq.len() - pairs.len(),
        inserted: cf_tokens.len() - pairs.len(),
    };
    let map = SaliencyMap::from_raw(seq.tokens.clone(), raw, "self_counterfactual")?;
    Ok((map, stats))
}

/// Uniform-random baseline map (seeded).
pub fn random_saliency(seq: &TokenSequence, seed: u64) -> Result<SaliencyMap> {
    if seq.is_empty() {
        return Err(Error::EmptyTokenSequence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..seq.len()).map(|_| rng.gen::<f64>()).collect();
    SaliencyMap::from_raw(seq.tokens.clone(), raw, "random")
}

/// Pearson correlation between two maps over the same tokens. A constant
/// map has zero variance, making the coefficient undefined; such pairs
/// are reported as errors so callers can exclude and count them.
pub fn pearson(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::MapLengthMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(Error::EmptyTokenSequence);
    }
    for m in [a, b] {
        if m.is_constant() {
            return Err(Error::UndefinedCorrelation(format!(
                "map {:?} is constant",
                m.method
            )));
        }
    }
    let n = a.len() as f64;
    let ma = a.weights.iter().sum::<f64>() / n;
    let mb = b.weights.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.weights.iter().zip(&b.weights) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}
