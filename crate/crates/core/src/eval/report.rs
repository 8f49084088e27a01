//! Comma-separated tables and the CNN-vs-LSTM comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::analysis::AnalysisRecord;
use super::bleu::BleuScore;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,entropy,grad_norm_in,grad_norm_out";

pub fn metrics_row(r: &AnalysisRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.split, r.loss, r.accuracy, r.entropy, r.grad_norm_in, r.grad_norm_out
    )
}

pub fn metrics_csv(records: &[AnalysisRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&metrics_row(r));
        s.push('\n');
    }
    s
}

pub fn write_metrics_csv(records: &[AnalysisRecord], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

/// Parses a table written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<AnalysisRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            msg: "metrics table header mismatch".into(),
        });
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format {
            offset: n + 2,
            msg: format!("bad metrics row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        out.push(AnalysisRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            split: f[1].to_string(),
            loss: num(2)?,
            accuracy: num(3)?,
            entropy: num(4)?,
            grad_norm_in: num(5)?,
            grad_norm_out: num(6)?,
            flagged: !(num(5)?.is_finite() && num(6)?.is_finite()),
        });
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<AnalysisRecord>> {
    parse_metrics_csv(&fs::read_to_string(path)?)
}

pub fn diversity_csv(counts: &[(usize, usize)]) -> String {
    let mut s = String::from("position,unique_count\n");
    for (p, c) in counts {
        writeln!(s, "{p},{c}").unwrap();
    }
    s
}

pub fn write_diversity_csv(counts: &[(usize, usize)], path: &Path) -> Result<()> {
    fs::write(path, diversity_csv(counts))?;
    Ok(())
}

/// `n,bleu,precision` rows plus the brevity penalty and lengths.
pub fn bleu_csv(score: &BleuScore) -> String {
    let mut s = String::from("n,bleu,precision\n");
    for (i, (b, p)) in score.scores.iter().zip(&score.precisions).enumerate() {
        writeln!(s, "{},{b},{p}", i + 1).unwrap();
    }
    writeln!(s, "# brevity_penalty={}", score.brevity_penalty).unwrap();
    writeln!(
        s,
        "# candidate_len={} reference_len={}",
        score.candidate_len, score.reference_len
    )
    .unwrap();
    s
}

pub fn write_bleu_csv(score: &BleuScore, path: &Path) -> Result<()> {
    fs::write(path, bleu_csv(score))?;
    Ok(())
}

/// Summary of one model's training-split trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub final_entropy: f64,
    pub final_accuracy: f64,
    pub first_grad_in: f64,
    pub last_grad_in: f64,
    /// `first_grad_in / last_grad_in`.
    pub grad_in_decay: f64,
}

impl Trajectory {
    /// Uses the `split` rows of `records`; `None` if there are none.
    pub fn from_records(records: &[AnalysisRecord], split: &str) -> Option<Self> {
        let rows: Vec<&AnalysisRecord> = records.iter().filter(|r| r.split == split).collect();
        let (first, last) = (rows.first()?, rows.last()?);
        Some(Self {
            final_entropy: last.entropy,
            final_accuracy: last.accuracy,
            first_grad_in: first.grad_norm_in,
            last_grad_in: last.grad_norm_in,
            grad_in_decay: first.grad_norm_in / last.grad_norm_in,
        })
    }
}

/// Side-by-side comparison of a convolutional and a recurrent run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub cnn: Trajectory,
    pub lstm: Trajectory,
    pub cnn_entropy_higher: bool,
    pub lstm_decays_more: bool,
}

impl Comparison {
    pub fn new(cnn: Trajectory, lstm: Trajectory) -> Self {
        Self {
            cnn_entropy_higher: cnn.final_entropy > lstm.final_entropy,
            lstm_decays_more: lstm.grad_in_decay > cnn.grad_in_decay,
            cnn,
            lstm,
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("metric,cnn,lstm\n");
        let rows = [
            ("final_entropy", self.cnn.final_entropy, self.lstm.final_entropy),
            ("final_accuracy", self.cnn.final_accuracy, self.lstm.final_accuracy),
            ("first_grad_norm_in", self.cnn.first_grad_in, self.lstm.first_grad_in),
            ("last_grad_norm_in", self.cnn.last_grad_in, self.lstm.last_grad_in),
            ("grad_norm_in_decay", self.cnn.grad_in_decay, self.lstm.grad_in_decay),
        ];
        for (name, a, b) in rows {
            writeln!(s, "{name},{a},{b}").unwrap();
        }
        s
    }

    /// Human-readable lines on the directional claims; informational only.
    pub fn claims(&self) -> Vec<String> {
        vec![
            format!(
                "entropy: cnn {:.4} vs lstm {:.4} nats (cnn higher: {})",
                self.cnn.final_entropy, self.lstm.final_entropy, self.cnn_entropy_higher
            ),
            format!(
                "input-embedding gradient decay: cnn x{:.2} vs lstm x{:.2} (lstm decays more: {})",
                self.cnn.grad_in_decay, self.lstm.grad_in_decay, self.lstm_decays_more
            ),
        ]
    }

    pub fn log(&self) {
        for line in self.claims() {
            log::info!("{line}");
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.csv();
        for line in self.claims() {
            writeln!(s, "# {line}").unwrap();
        }
        fs::write(path, s)?;
        Ok(())
    }
}
