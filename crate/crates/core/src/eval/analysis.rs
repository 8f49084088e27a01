use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::{Example, END};
use crate::decode::{argmax, Hypothesis};
use crate::error::{Error, Result};
use crate::model::{Captioner, ForwardMode};
use crate::tensor::Graph;

/// First and last word positions covered by the diversity table.
pub const DIVERSITY_POSITIONS: std::ops::RangeInclusive<usize> = 1..=13;

/// One row of the per-epoch metric stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisRecord {
    pub epoch: usize,
    pub split: String,
    /// Mean cross-entropy per unpadded token (nats).
    pub loss: f64,
    /// Mean softmax entropy per unpadded token (nats).
    pub entropy: f64,
    pub accuracy: f64,
    pub grad_norm_in: f64,
    pub grad_norm_out: f64,
    /// Set when a probe gradient was non-finite.
    pub flagged: bool,
}

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`. Uses compensated summation so
/// large vocabularies keep full precision.
pub fn row_entropy(p: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in p.iter().filter(|&&x| x > 0.0) {
        let term = -x * x.ln();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Teacher-forced statistics over a dataset, per unpadded token.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenStats {
    pub loss: f64,
    pub entropy: f64,
    pub accuracy: f64,
    pub tokens: usize,
    /// Mean entropy at each target position, `None` where no caption reaches.
    pub entropy_by_position: Vec<Option<f64>>,
}

/// One dropout-free teacher-forced pass per example, accumulating loss,
/// entropy and argmax accuracy over the unpadded positions.
pub fn token_stats<M: Captioner + ?Sized>(model: &M, data: &[Example]) -> Result<TokenStats> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let width = data.iter().map(|e| e.seq.input.len()).max().unwrap_or(0);
    let mut pos_sum = vec![0.0; width];
    let mut pos_n = vec![0usize; width];
    let (mut loss, mut entropy, mut correct, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    for ex in data {
        let vl = ex.seq.valid_len;
        let probs = model.probs(&ex.seq.input[..vl], &ex.features, ForwardMode::EVAL)?;
        for (i, &t) in ex.seq.target[..vl].iter().enumerate() {
            let row = probs.row(i);
            let h = row_entropy(row);
            entropy += h;
            pos_sum[i] += h;
            pos_n[i] += 1;
            loss -= row[t].max(crate::tensor::PROB_FLOOR).ln();
            if argmax(row) == t {
                correct += 1;
            }
            tokens += 1;
        }
    }
    let n = tokens as f64;
    Ok(TokenStats {
        loss: loss / n,
        entropy: entropy / n,
        accuracy: correct as f64 / n,
        tokens,
        entropy_by_position: pos_sum
            .iter()
            .zip(&pos_n)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
    })
}

/// Mean output entropy over unpadded positions.
pub fn entropy_profile<M: Captioner + ?Sized>(model: &M, data: &[Example]) -> Result<f64> {
    Ok(token_stats(model, data)?.entropy)
}

/// Fraction of unpadded positions whose argmax equals the target.
pub fn word_accuracy<M: Captioner + ?Sized>(model: &M, data: &[Example]) -> Result<f64> {
    Ok(token_stats(model, data)?.accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradNorms {
    pub input: f64,
    pub output: f64,
    pub finite: bool,
}

/// L2 norms of the per-example NLL gradient (mean over unpadded tokens) at the
/// word-embedding table and at the output projection, averaged over `batch`.
pub fn grad_norm_probe<M: Captioner + ?Sized>(model: &M, batch: &[Example]) -> Result<GradNorms> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (in_name, out_name) = (model.input_embedding_param(), model.output_projection_param());
    let (mut sum_in, mut sum_out, mut finite) = (0.0, 0.0, true);
    for ex in batch {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let vl = ex.seq.valid_len;
        let probs = model.record_probs(&mut g, &p, &ex.seq.input[..vl], &ex.features, ForwardMode::EVAL)?;
        let loss = g.nll(probs, &ex.seq.target[..vl], 1.0 / vl as f64)?;
        g.backward(loss)?;
        let norm = |name: &str| -> f64 {
            g.grad(p.var(name))
                .map_or(0.0, |d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (a, b) = (norm(in_name), norm(out_name));
        finite &= a.is_finite() && b.is_finite();
        sum_in += a;
        sum_out += b;
    }
    let n = batch.len() as f64;
    if !finite {
        log::warn!("gradient probe saw a non-finite gradient");
    }
    Ok(GradNorms {
        input: sum_in / n,
        output: sum_out / n,
        finite,
    })
}

/// Full analysis row for one split.
pub fn evaluate_split<M: Captioner + ?Sized>(
    model: &M,
    data: &[Example],
    probe: &[Example],
    epoch: usize,
    split: &str,
) -> Result<AnalysisRecord> {
    let stats = token_stats(model, data)?;
    let norms = grad_norm_probe(model, probe)?;
    Ok(AnalysisRecord {
        epoch,
        split: split.to_string(),
        loss: stats.loss,
        entropy: stats.entropy,
        accuracy: stats.accuracy,
        grad_norm_in: norms.input,
        grad_norm_out: norms.output,
        flagged: !norms.finite,
    })
}

/// Distinct tokens at each word position across every returned hypothesis.
/// Position 1 is the first word; `<E>` is not counted. Returns
/// `(position, count)` for positions 1..=13.
pub fn unique_words_per_position(beams: &[Vec<Hypothesis>]) -> Vec<(usize, usize)> {
    let last = *DIVERSITY_POSITIONS.end();
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); last];
    for hyp in beams.iter().flatten() {
        for (i, &tok) in hyp.tokens.iter().enumerate().take(last) {
            if tok != END {
                seen[i].insert(tok);
            }
        }
    }
    DIVERSITY_POSITIONS.map(|p| (p, seen[p - 1].len())).collect()
}
