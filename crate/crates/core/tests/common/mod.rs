#![allow(dead_code)]

use std::collections::BTreeMap;

use convcap::data::{ImageFeatures, SpatialGrid, TokenSeq};
use convcap::model::{
    Captioner, CaptionModel, ForwardMode, LstmConfig, LstmModel, ModelConfig, SpatialDims,
};
use convcap::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 7;
pub const FEAT: usize = 5;
pub const GRID: usize = 2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter with uniform noise in `(-scale, scale)`. Weight-norm
/// gains are kept away from zero.
pub fn randomize<M: Captioner>(model: &mut M, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (name, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-scale..scale);
            if name.ends_with(".g") {
                *v = 0.5 + v.abs();
            }
        }
    }
}

pub fn features(seed: u64, feat: usize, spatial: Option<(usize, usize)>) -> ImageFeatures {
    let mut r = rng(seed);
    ImageFeatures {
        global: (0..feat).map(|_| r.random_range(-1.0..1.0)).collect(),
        spatial: spatial.map(|(g, c)| {
            SpatialGrid::new(g, c, (0..g * g * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        }),
    }
}

pub fn random_caption(seed: u64, vocab: usize, len: usize) -> Vec<usize> {
    let mut r = rng(seed);
    // skip the reserved ids so the caption is a full-length sentence
    (0..len).map(|_| r.random_range(3..vocab)).collect()
}

/// Tiny convolutional config: |Y|=7, D=H=8, L=2, N=4.
pub fn tiny_cnn(attention: bool, weight_norm: bool, residual: bool) -> ModelConfig {
    let mut c = ModelConfig::tiny(VOCAB, FEAT);
    c.attention = attention;
    c.weight_norm = weight_norm;
    c.residual = residual;
    if attention {
        c.spatial = Some(SpatialDims {
            grid: GRID,
            channels: c.hidden_dim,
        });
    }
    c
}

pub fn tiny_lstm() -> LstmConfig {
    LstmConfig {
        vocab_size: VOCAB,
        feature_dim: FEAT,
        embed_dim: 8,
        hidden_dim: 8,
        max_steps: 4,
    }
}

pub fn cnn(attention: bool, weight_norm: bool, residual: bool, seed: u64) -> CaptionModel {
    let mut m = CaptionModel::new(tiny_cnn(attention, weight_norm, residual), seed).unwrap();
    randomize(&mut m, seed + 100, 0.5);
    m
}

pub fn lstm(seed: u64) -> LstmModel {
    let mut m = LstmModel::new(tiny_lstm(), seed).unwrap();
    randomize(&mut m, seed + 100, 0.5);
    m
}

pub fn features_for<M: Captioner>(model: &M, seed: u64) -> ImageFeatures {
    let spatial = match model.kind() {
        convcap::model::ModelKind::Cnn => Some((GRID, 8)),
        convcap::model::ModelKind::Lstm => None,
    };
    features(seed, FEAT, spatial)
}

/// Per-token mean NLL with dropout off.
pub fn loss<M: Captioner>(model: &M, seq: &TokenSeq, f: &ImageFeatures) -> f64 {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let probs = model
        .record_probs(&mut g, &p, &seq.input, f, ForwardMode::EVAL)
        .unwrap();
    let l = g
        .nll(probs, &seq.target[..seq.valid_len], 1.0 / seq.valid_len as f64)
        .unwrap();
    g.value(l)[0]
}

pub fn analytic_grads<M: Captioner>(
    model: &M,
    seq: &TokenSeq,
    f: &ImageFeatures,
) -> BTreeMap<String, Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let probs = model
        .record_probs(&mut g, &p, &seq.input, f, ForwardMode::EVAL)
        .unwrap();
    let l = g
        .nll(probs, &seq.target[..seq.valid_len], 1.0 / seq.valid_len as f64)
        .unwrap();
    g.backward(l).unwrap();
    model.params().gradients(&g, &p)
}

/// Relative error with a floor on the denominator so that entries where both
/// values are tiny compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error per parameter group between the analytic gradient and
/// central differences with step `h`.
pub fn grad_check<M: Captioner + Clone>(
    model: &M,
    seq: &TokenSeq,
    f: &ImageFeatures,
    h: f64,
) -> BTreeMap<String, f64> {
    let analytic = analytic_grads(model, seq, f);
    let mut work = model.clone();
    let mut out = BTreeMap::new();
    for (name, grad) in &analytic {
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let orig = work.params().get(name).unwrap().data()[i];
            work.params_mut().get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&work, seq, f);
            work.params_mut().get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&work, seq, f);
            work.params_mut().get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grad[i], numeric));
        }
        out.insert(name.clone(), worst);
    }
    out
}
