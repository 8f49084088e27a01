//! Sequential inference: greedy, tempered sampling and beam search.
//!
//! Every step re-runs the model over the whole prefix, so decoding reuses the
//! exact teacher-forced code path.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageFeatures, END};
use crate::error::Result;
use crate::model::Captioner;

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// A (partial) caption with its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids; ends with `<E>` when `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Caption ids without the trailing `<E>`.
    pub fn caption(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn extend(hyp: &Hypothesis, token: usize, p: f64) -> Hypothesis {
    let mut tokens = hyp.tokens.clone();
    tokens.push(token);
    Hypothesis {
        finished: token == END,
        log_prob: hyp.log_prob + p.ln(),
        tokens,
    }
}

fn empty() -> Hypothesis {
    Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }
}

pub fn greedy_decode<M: Captioner + ?Sized>(
    model: &M,
    features: &ImageFeatures,
    max_steps: usize,
) -> Result<Hypothesis> {
    let mut hyp = empty();
    while hyp.tokens.len() < max_steps && !hyp.finished {
        let probs = model.next_token_probs(features, &hyp.tokens)?;
        let tok = argmax(&probs);
        hyp = extend(&hyp, tok, probs[tok]);
    }
    Ok(hyp)
}

/// Samples each word from `p^(1/temperature)`, renormalised.
pub fn sample_decode<M: Captioner + ?Sized>(
    model: &M,
    features: &ImageFeatures,
    max_steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Hypothesis> {
    assert!(temperature > 0.0, "temperature must be positive");
    if temperature < GREEDY_TEMPERATURE {
        return greedy_decode(model, features, max_steps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hyp = empty();
    while hyp.tokens.len() < max_steps && !hyp.finished {
        let probs = model.next_token_probs(features, &hyp.tokens)?;
        let tempered: Vec<f64> = probs.iter().map(|p| p.powf(1.0 / temperature)).collect();
        let total: f64 = tempered.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut tok = tempered.len() - 1;
        for (i, w) in tempered.iter().enumerate() {
            if u < *w {
                tok = i;
                break;
            }
            u -= w;
        }
        hyp = extend(&hyp, tok, probs[tok]);
    }
    Ok(hyp)
}

/// Orders by score descending, then token sequence ascending.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Number of distinct captions of at most `max_steps` words, saturating.
fn hypothesis_space(vocab: usize, max_steps: usize) -> usize {
    let mut total: usize = 0;
    let mut live: usize = 1;
    for _ in 0..max_steps {
        // each live prefix ends here with <E> or continues with another word
        total = total.saturating_add(live);
        live = live.saturating_mul(vocab.saturating_sub(1));
    }
    total.saturating_add(live)
}

/// Beam search ranked by summed log-probability, no length normalisation.
///
/// Each step expands every live hypothesis over the whole vocabulary and keeps
/// the best `beam` candidates; those ending in `<E>` are frozen. Returns up to
/// `beam` hypotheses, best first.
pub fn beam_search<M: Captioner + ?Sized>(
    model: &M,
    features: &ImageFeatures,
    max_steps: usize,
    beam: usize,
) -> Result<Vec<Hypothesis>> {
    assert!(beam >= 1, "beam size must be at least 1");
    let cap = hypothesis_space(model.vocab_size(), max_steps);
    let beam = if beam > cap {
        log::warn!("beam size {beam} exceeds the {cap} possible captions; using {cap}");
        cap
    } else {
        beam
    };
    let mut live = vec![empty()];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for hyp in &live {
            let probs = model.next_token_probs(features, &hyp.tokens)?;
            for (tok, &p) in probs.iter().enumerate() {
                candidates.push(extend(hyp, tok, p));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    // anything still open hit the length cap
    done.extend(live);
    done.sort_by(rank);
    done.truncate(beam);
    Ok(done)
}
