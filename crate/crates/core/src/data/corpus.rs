use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::features::{FeatureSet, ImageFeatures};
use super::sequence::TokenSeq;
use super::vocab::{tokenize, Vocabulary};
use crate::error::{Error, Result};

/// One training caption and the image it describes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusRecord {
    pub image_id: String,
    pub caption: Vec<String>,
}

/// A record resolved against a vocabulary and the feature store.
#[derive(Clone, Debug)]
pub struct Example {
    pub image_id: String,
    pub seq: TokenSeq,
    pub features: Arc<ImageFeatures>,
}

/// Reads `id<TAB>caption` lines. Blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected id<TAB>caption", path.display(), n + 1))
        })?;
        let caption = tokenize(caption);
        if caption.is_empty() {
            return Err(Error::Config(format!("{}:{}: empty caption", path.display(), n + 1)));
        }
        out.push(CorpusRecord {
            image_id: id.to_string(),
            caption,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

pub fn write_corpus(records: &[CorpusRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.image_id);
        text.push('\t');
        text.push_str(&r.caption.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Splits by image, holding out the last `val_fraction` of distinct images
/// in first-appearance order.
pub fn split_train_val(
    records: &[CorpusRecord],
    val_fraction: f64,
) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let mut order = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if seen.insert(r.image_id.as_str()) {
            order.push(r.image_id.as_str());
        }
    }
    let n_val = ((order.len() as f64) * val_fraction).round() as usize;
    let val_ids: BTreeSet<&str> = order[order.len() - n_val.min(order.len())..]
        .iter()
        .copied()
        .collect();
    records
        .iter()
        .cloned()
        .partition(|r| !val_ids.contains(r.image_id.as_str()))
}

pub fn build_examples(
    records: &[CorpusRecord],
    features: &FeatureSet,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>> {
    let shared: std::collections::BTreeMap<&str, Arc<ImageFeatures>> = features
        .iter()
        .map(|(k, v)| (k.as_str(), Arc::new(v.clone())))
        .collect();
    records
        .iter()
        .map(|r| {
            let feats = shared.get(r.image_id.as_str()).ok_or_else(|| {
                Error::Config(format!("no features for image {}", r.image_id))
            })?;
            Ok(Example {
                image_id: r.image_id.clone(),
                seq: TokenSeq::from_tokens(&r.caption, vocab, max_len),
                features: Arc::clone(feats),
            })
        })
        .collect()
}
