//! Greedy, beam and k-best sequence generation.
//!
//! Used both for evaluation and for constructing distillation targets.
//! Finished hypotheses are ranked by `logprob / lp(len)` with
//! `lp(len) = ((5+len)/6)^alpha`; ties break by earlier finishing step,
//! then lexicographic token order, so decoding is a deterministic function
//! of `(model, source, config)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, ModelState};
use crate::tensor::{log_softmax, Real};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
    KBest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub k_best: usize,
    /// Length-penalty exponent alpha; 0 disables normalization.
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 4,
            k_best: 1,
            length_penalty: 0.6,
            max_len: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.k_best == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("decode sizes must be positive".into()));
        }
        if self.k_best > self.beam_size {
            return Err(Error::InvalidConfig(format!(
                "k_best {} exceeds beam_size {}",
                self.k_best, self.beam_size
            )));
        }
        if self.length_penalty < 0.0 {
            return Err(Error::InvalidConfig("length penalty must be non-negative".into()));
        }
        Ok(())
    }

    /// Greedy behaves as beam size 1 regardless of the configured width.
    pub fn effective_beam(&self) -> usize {
        match self.mode {
            DecodeMode::Greedy => 1,
            _ => self.beam_size,
        }
    }
}

/// `((5 + len) / 6)^alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// A finished hypothesis: generated tokens (with the closing `EOS` unless
/// the length budget ran out), the summed log-probability and the
/// length-normalized score it was ranked by.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct KBestResult {
    /// Score-descending, pairwise distinct sequences.
    pub hyps: Vec<ScoredSequence>,
    /// True when fewer than the requested k hypotheses finished.
    pub short: bool,
}

struct Hyp<T: Real> {
    tokens: Vec<usize>,
    logprob: f64,
    state: DecoderState<T>,
    /// Log-softmax over the next token, given `tokens`.
    next_logp: Vec<f64>,
}

struct Finished {
    tokens: Vec<usize>,
    logprob: f64,
    finish_step: usize,
}

fn ranked_finished(mut pool: Vec<Finished>, alpha: f64) -> Vec<ScoredSequence> {
    let mut scored: Vec<(f64, usize, Vec<usize>, f64)> = pool
        .drain(..)
        .map(|f| {
            let score = f.logprob / length_penalty(f.tokens.len(), alpha);
            (score, f.finish_step, f.tokens, f.logprob)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    scored
        .into_iter()
        .map(|(score, _, tokens, logprob)| ScoredSequence { tokens, logprob, score })
        .collect()
}

fn beam_search<T: Real>(
    model: &ModelState<T>,
    src: &[usize],
    config: &DecodeConfig,
) -> Result<Vec<ScoredSequence>> {
    config.validate()?;
    let beam = config.effective_beam();
    // the decoder consumes BOS plus every generated token except the last
    let max_new = config.max_len.min(model.config().max_len - 1);
    let enc = model.encode_source(src)?;

    let mut start_state = model.start_decoder();
    let start_logits = model.decode_step(&enc, &mut start_state, BOS)?;
    let start_logp: Vec<f64> = log_softmax(&start_logits).iter().map(|&x| Real::to_f64(x)).collect();
    let mut actives =
        vec![Hyp { tokens: Vec::new(), logprob: 0.0, state: start_state, next_logp: start_logp }];
    let mut finished: Vec<Finished> = Vec::new();

    for step in 1..=max_new {
        // expand every active by every token, keep the best `beam`
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new(); // (logprob, hyp, token)
        for (hi, hyp) in actives.iter().enumerate() {
            for (tok, lp) in hyp.next_logp.iter().enumerate() {
                candidates.push((hyp.logprob + lp, hi, tok));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        candidates.truncate(beam);

        let mut next_actives: Vec<Hyp<T>> = Vec::new();
        for (logprob, hi, tok) in candidates {
            let hyp = &actives[hi];
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            if tok == EOS || step == max_new {
                // EOS, or out of budget: finished either way
                finished.push(Finished { tokens, logprob, finish_step: step });
            } else {
                let mut state = hyp.state.clone();
                let logits = model.decode_step(&enc, &mut state, tok)?;
                let next_logp = log_softmax(&logits).iter().map(|&x| Real::to_f64(x)).collect();
                next_actives.push(Hyp { tokens, logprob, state, next_logp });
            }
        }
        actives = next_actives;
        if actives.is_empty() {
            break;
        }
    }

    Ok(ranked_finished(finished, config.length_penalty))
}

/// Argmax decoding from `BOS` until `EOS` or the length budget.
pub fn greedy_decode<T: Real>(
    model: &ModelState<T>,
    src: &[usize],
    config: &DecodeConfig,
) -> Result<Vec<usize>> {
    config.validate()?;
    let max_new = config.max_len.min(model.config().max_len - 1);
    let enc = model.encode_source(src)?;
    let mut state = model.start_decoder();
    let mut tokens = Vec::new();
    let mut input = BOS;
    for _ in 0..max_new {
        let logits = model.decode_step(&enc, &mut state, input)?;
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        tokens.push(best);
        if best == EOS {
            break;
        }
        input = best;
    }
    Ok(tokens)
}

/// Length-normalized beam search returning the best hypothesis.
pub fn beam_decode<T: Real>(
    model: &ModelState<T>,
    src: &[usize],
    config: &DecodeConfig,
) -> Result<ScoredSequence> {
    let ranked = beam_search(model, src, config)?;
    Ok(ranked.into_iter().next().expect("beam search always finishes at least one hypothesis"))
}

/// Top-k distinct finished hypotheses, score-descending. When fewer than
/// `k_best` hypotheses finish, returns all found with `short` set.
pub fn kbest_decode<T: Real>(
    model: &ModelState<T>,
    src: &[usize],
    config: &DecodeConfig,
) -> Result<KBestResult> {
    let mut ranked = beam_search(model, src, config)?;
    let short = ranked.len() < config.k_best;
    ranked.truncate(config.k_best);
    Ok(KBestResult { hyps: ranked, short })
}

/// Decodes many sources in parallel, preserving order.
pub fn decode_corpus<T: Real>(
    model: &ModelState<T>,
    sources: &[Vec<usize>],
    config: &DecodeConfig,
) -> Result<Vec<ScoredSequence>> {
    sources
        .par_iter()
        .map(|src| match config.mode {
            DecodeMode::Greedy => {
                let tokens = greedy_decode(model, src, config)?;
                Ok(ScoredSequence { tokens, logprob: 0.0, score: 0.0 })
            }
            _ => beam_decode(model, src, config),
        })
        .collect()
}

/// Strips the closing `EOS` for corpus emission.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&t) if t == EOS => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}
