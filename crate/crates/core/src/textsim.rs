//! Similarity scores between a reference text and a candidate rewrite,
//! computed over the corpus tokenizer's lowercased tokens: unigram BLEU
//! and ROUGE, LCS-recall ROUGE-L, and an ordered-match ratio based on
//! recursive longest-block alignment.
//!
//! All scores live in [0, 1]. Edge conventions: an empty candidate
//! scores 0 everywhere; an empty reference scores 1 against an empty
//! candidate (identical) and 0 otherwise. No smoothing is applied to
//! BLEU; at unigram order none is needed for non-degenerate inputs.

use std::collections::HashMap;

use crate::corpus::TokenSequence;
use crate::seqmatch::{lcs_length, ro_matched};

/// Unigram BLEU: clipped unigram precision times the brevity penalty
/// `exp(1 - r/c)` applied when the candidate is no longer than the
/// reference. Equals 1 exactly when the two token multisets are equal.
pub fn bleu1(reference: &TokenSequence, candidate: &TokenSequence) -> f64 {
    bleu1_tokens(&reference.tokens, &candidate.tokens)
}

/// Unigram ROUGE: clipped unigram overlap divided by the reference token
/// count. Equals 1 exactly when the reference multiset is contained in
/// the candidate multiset.
pub fn rouge1(reference: &TokenSequence, candidate: &TokenSequence) -> f64 {
    rouge1_tokens(&reference.tokens, &candidate.tokens)
}

/// LCS recall: longest-common-subsequence length divided by the
/// reference length. Equals 1 exactly when the reference is a
/// subsequence of the candidate.
pub fn rouge_l(reference: &TokenSequence, candidate: &TokenSequence) -> f64 {
    rouge_l_tokens(&reference.tokens, &candidate.tokens)
}

/// Ordered-match ratio `2M / (len(reference) + len(candidate))` where
/// `M` counts tokens matched by the Ratcliff/Obershelp longest-block
/// decomposition (see [`crate::seqmatch::ro_matched`]). Equals 1 exactly
/// when the token sequences are equal.
pub fn match_ratio(reference: &TokenSequence, candidate: &TokenSequence) -> f64 {
    match_ratio_tokens(&reference.tokens, &candidate.tokens)
}

pub fn bleu1_tokens(reference: &[String], candidate: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let precision = clipped_overlap(reference, candidate) as f64 / candidate.len() as f64;
    let (r, c) = (reference.len() as f64, candidate.len() as f64);
    let penalty = if c <= r { (1.0 - r / c).exp() } else { 1.0 };
    precision * penalty
}

pub fn rouge1_tokens(reference: &[String], candidate: &[String]) -> f64 {
    if reference.is_empty() {
        return if candidate.is_empty() { 1.0 } else { 0.0 };
    }
    if candidate.is_empty() {
        return 0.0;
    }
    clipped_overlap(reference, candidate) as f64 / reference.len() as f64
}

pub fn rouge_l_tokens(reference: &[String], candidate: &[String]) -> f64 {
    if reference.is_empty() {
        return if candidate.is_empty() { 1.0 } else { 0.0 };
    }
    if candidate.is_empty() {
        return 0.0;
    }
    lcs_length(reference, candidate) as f64 / reference.len() as f64
}

pub fn match_ratio_tokens(reference: &[String], candidate: &[String]) -> f64 {
    let total = reference.len() + candidate.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * ro_matched(reference, candidate) as f64 / total as f64
}

/// Sum over token types of `min(count in reference, count in candidate)`.
fn clipped_overlap(reference: &[String], candidate: &[String]) -> usize {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in candidate {
        *cand_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    cand_counts
        .iter()
        .map(|(t, &c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum()
}
