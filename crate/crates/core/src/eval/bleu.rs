use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Stand-in precision for orders with no matching n-grams, so the geometric
/// mean stays defined.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Corpus-level BLEU-1..n.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    /// `scores[n-1]` is BLEU-n.
    pub scores: Vec<f64>,
    /// Clipped (unsmoothed) modified precision per order.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `cand_len`; ties pick the shorter reference.
fn closest_ref_len<S>(refs: &[Vec<S>], cand_len: usize) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

/// Corpus BLEU with clipped n-gram precision, geometric mean and brevity
/// penalty. `references[i]` holds every reference for `candidates[i]`.
pub fn corpus_bleu<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    max_n: usize,
) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0;
    let mut ref_len = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("candidate without references".into()));
        }
        cand_len += cand.len();
        ref_len += closest_ref_len(refs, cand.len());
        for n in 1..=max_n {
            let counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let scores = precisions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            log_sum += if p > 0.0 { p.ln() } else { BLEU_EPSILON.ln() };
            brevity_penalty * (log_sum / (i + 1) as f64).exp()
        })
        .collect();
    Ok(BleuScore {
        scores,
        precisions,
        brevity_penalty,
        candidate_len: cand_len,
        reference_len: ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_is_one() {
        let c = vec![toks("a red ball on the table")];
        let r = vec![vec![toks("a red ball on the table")]];
        let s = corpus_bleu(&c, &r, 4).unwrap();
        for b in s.scores {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping() {
        let s = corpus_bleu(&[toks("the the the the")], &[vec![toks("the cat sat")]], 4).unwrap();
        // candidate longer than reference: no brevity penalty
        assert_eq!(s.brevity_penalty, 1.0);
        assert!((s.scores[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_case() {
        let s = corpus_bleu(&[toks("the cat")], &[vec![toks("the cat sat on")]], 2).unwrap();
        let bp = (1.0f64 - 4.0 / 2.0).exp();
        assert!((s.scores[0] - bp).abs() < 1e-12);
        assert!((s.scores[1] - bp).abs() < 1e-12);
    }

    #[test]
    fn closest_reference_length() {
        let refs = vec![toks("a b c d e f"), toks("a b")];
        assert_eq!(closest_ref_len(&refs, 3), 2);
        let refs = vec![toks("a b c d"), toks("a b")];
        assert_eq!(closest_ref_len(&refs, 3), 2);
    }

    #[test]
    fn no_four_gram_overlap_is_near_zero() {
        let s = corpus_bleu(&[toks("a b c d e")], &[vec![toks("a b c x d e")]], 4).unwrap();
        assert!(s.scores[3] <= 1e-2);
        assert!(s.scores[0] > 0.5);
    }

    #[test]
    fn empty_candidates_error() {
        let c: Vec<Vec<String>> = vec![];
        let r: Vec<Vec<Vec<String>>> = vec![];
        assert!(matches!(corpus_bleu(&c, &r, 4), Err(Error::EmptyCandidates)));
    }
}
