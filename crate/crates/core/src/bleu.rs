//! Corpus-level BLEU-4, case-sensitive, single reference.
//!
//! Smoothing: an n-gram level (n >= 2) with matches but zero precision is
//! replaced by `1 / (2 * denominator)`. A level whose denominator is zero
//! (every candidate shorter than n) is vacuous and counts as precision 1,
//! so a corpus identical to its reference scores exactly 100 regardless of
//! sentence lengths. Zero unigram precision scores 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(tokens: &[crate::corpus::Token], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(|t| t.as_str()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over aligned candidate/reference sentences.
pub fn corpus_bleu(candidates: &[Sentence], references: &[Sentence]) -> Result<BleuScore> {
    if candidates.len() != references.len() {
        return Err(Error::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matched = [0u64; MAX_ORDER];
    let mut total = [0u64; MAX_ORDER];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references.iter()) {
        let c_toks = cand.tokens();
        let r_toks = reference.tokens();
        candidate_len += c_toks.len();
        reference_len += r_toks.len();
        for n in 1..=MAX_ORDER {
            let c_counts = ngram_counts(c_toks, n);
            if c_counts.is_empty() {
                continue;
            }
            let r_counts = ngram_counts(r_toks, n);
            for (gram, c) in &c_counts {
                total[n - 1] += c;
                let clip = r_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += (*c).min(clip);
            }
        }
    }

    let mut precisions = [1.0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            // vacuous level: no candidate n-grams exist
            precisions[n] = 1.0;
        } else if matched[n] == 0 {
            if n == 0 {
                precisions[n] = 0.0;
            } else {
                precisions[n] = 1.0 / (2.0 * total[n] as f64);
            }
        } else {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }

    let brevity_penalty = if candidate_len == 0 || candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };

    let bleu = if candidate_len == 0 || precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };

    Ok(BleuScore { bleu, precisions, brevity_penalty, candidate_len, reference_len })
}

/// Fraction (0-100) of candidates exactly equal to their reference.
/// Auxiliary metric; meaningful on synthetic tasks where an oracle exists.
pub fn exact_match(candidates: &[Sentence], references: &[Sentence]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let hits = candidates
        .iter()
        .zip(references.iter())
        .filter(|(c, r)| c.tokens() == r.tokens())
        .count();
    Ok(100.0 * hits as f64 / candidates.len() as f64)
}
