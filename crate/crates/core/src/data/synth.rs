//! Deterministic toy scenes with templated captions.
//!
//! A scene is a (color, object, relation, place) tuple. The global feature is
//! a fixed random projection of the one-hot attributes plus noise. The spatial
//! grid carries the object/color signature inside a square block of cells and
//! a weak place signature everywhere else, so attention has something to find.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::corpus::CorpusRecord;
use super::features::{FeatureSet, ImageFeatures, SpatialGrid};
use super::vocab::Vocabulary;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];
pub const OBJECTS: [&str; 6] = ["ball", "cat", "dog", "cup", "book", "box"];
pub const RELATIONS: [&str; 4] = ["on", "under", "near", "behind"];
pub const PLACES: [&str; 5] = ["table", "chair", "bed", "floor", "sofa"];

const ATTRIBUTES: usize = COLORS.len() + OBJECTS.len() + RELATIONS.len() + PLACES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub feature_dim: usize,
    pub grid: usize,
    pub channels: usize,
    /// Side length of the object's cell block.
    pub block: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            grid: 4,
            channels: 64,
            block: 2,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub color: usize,
    pub object: usize,
    pub relation: usize,
    pub place: usize,
    pub block_row: usize,
    pub block_col: usize,
}

impl Scene {
    pub fn attributes(&self) -> (usize, usize, usize, usize) {
        (self.color, self.object, self.relation, self.place)
    }

    /// Cell indices (row-major) covered by the object block.
    pub fn block_cells(&self, cfg: &SynthConfig) -> Vec<usize> {
        let mut cells = Vec::with_capacity(cfg.block * cfg.block);
        for r in self.block_row..self.block_row + cfg.block {
            for c in self.block_col..self.block_col + cfg.block {
                cells.push(r * cfg.grid + c);
            }
        }
        cells
    }
}

/// The template grammar: "a {color} {object} {relation} the {place}".
pub fn caption_for(scene: &Scene) -> Vec<String> {
    [
        "a",
        COLORS[scene.color],
        OBJECTS[scene.object],
        RELATIONS[scene.relation],
        "the",
        PLACES[scene.place],
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub scenes: Vec<Scene>,
    pub records: Vec<CorpusRecord>,
    pub features: FeatureSet,
    pub vocab: Vocabulary,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Values are rounded through `f32` so the feature file round-trips exactly.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

pub fn synth_corpus(num_scenes: usize, seed: u64) -> SynthCorpus {
    synth_corpus_with(&SynthConfig::default(), num_scenes, seed)
}

pub fn synth_corpus_with(cfg: &SynthConfig, num_scenes: usize, seed: u64) -> SynthCorpus {
    assert!(num_scenes >= 1, "need at least one scene");
    assert!(cfg.block >= 1 && cfg.block <= cfg.grid, "block must fit in the grid");

    // Fixed per-seed lookups, independent of how many scenes are drawn.
    let mut fixed = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_cafe_babe);
    let projection: Vec<Vec<f64>> = (0..ATTRIBUTES)
        .map(|_| normal_vec(&mut fixed, cfg.feature_dim))
        .collect();
    let object_sig: Vec<Vec<f64>> = (0..OBJECTS.len())
        .map(|_| normal_vec(&mut fixed, cfg.channels))
        .collect();
    let color_sig: Vec<Vec<f64>> = (0..COLORS.len())
        .map(|_| normal_vec(&mut fixed, cfg.channels))
        .collect();
    let place_sig: Vec<Vec<f64>> = (0..PLACES.len())
        .map(|_| normal_vec(&mut fixed, cfg.channels))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = cfg.grid - cfg.block + 1;
    let mut scenes = Vec::with_capacity(num_scenes);
    let mut records = Vec::with_capacity(num_scenes);
    let mut features = FeatureSet::new();
    for i in 0..num_scenes {
        let scene = Scene {
            color: rng.random_range(0..COLORS.len()),
            object: rng.random_range(0..OBJECTS.len()),
            relation: rng.random_range(0..RELATIONS.len()),
            place: rng.random_range(0..PLACES.len()),
            block_row: rng.random_range(0..span),
            block_col: rng.random_range(0..span),
        };
        let active = [
            scene.color,
            COLORS.len() + scene.object,
            COLORS.len() + OBJECTS.len() + scene.relation,
            COLORS.len() + OBJECTS.len() + RELATIONS.len() + scene.place,
        ];
        let global = (0..cfg.feature_dim)
            .map(|j| {
                let clean: f64 = active.iter().map(|&a| projection[a][j]).sum();
                f32_exact(clean + cfg.noise * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();

        let block = scene.block_cells(cfg);
        let mut spatial = Vec::with_capacity(cfg.grid * cfg.grid * cfg.channels);
        for cell in 0..cfg.grid * cfg.grid {
            let inside = block.contains(&cell);
            for ch in 0..cfg.channels {
                let clean = if inside {
                    object_sig[scene.object][ch] + 0.5 * color_sig[scene.color][ch]
                } else {
                    0.3 * place_sig[scene.place][ch]
                };
                spatial.push(f32_exact(clean + cfg.noise * rng.sample::<f64, _>(StandardNormal)));
            }
        }

        let image_id = format!("scene_{i:05}");
        features.insert(
            image_id.clone(),
            ImageFeatures {
                global,
                spatial: Some(
                    SpatialGrid::new(cfg.grid, cfg.channels, spatial)
                        .expect("grid dimensions are consistent"),
                ),
            },
        );
        records.push(CorpusRecord {
            image_id,
            caption: caption_for(&scene),
        });
        scenes.push(scene);
    }

    let lexicon = ["a", "the"]
        .into_iter()
        .chain(COLORS)
        .chain(OBJECTS)
        .chain(RELATIONS)
        .chain(PLACES)
        .map(String::from);
    SynthCorpus {
        config: cfg.clone(),
        scenes,
        records,
        features,
        vocab: Vocabulary::from_tokens(lexicon),
    }
}
