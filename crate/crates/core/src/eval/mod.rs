//! BLEU and the training diagnostics: entropy, word accuracy, gradient norms
//! and per-position diversity.

mod analysis;
mod bleu;
mod report;

pub use analysis::{
    entropy_profile, evaluate_split, grad_norm_probe, row_entropy, token_stats,
    unique_words_per_position, word_accuracy, AnalysisRecord, GradNorms, TokenStats,
    DIVERSITY_POSITIONS,
};
pub use bleu::{corpus_bleu, BleuScore, BLEU_EPSILON};
pub use report::{
    bleu_csv, diversity_csv, metrics_csv, metrics_row, parse_metrics_csv, read_metrics_csv, write_bleu_csv, write_diversity_csv,
    write_metrics_csv, Comparison, Trajectory, METRICS_HEADER,
};
