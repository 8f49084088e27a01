//! Vocabulary, caption encoding, feature files and the synthetic scene corpus.

mod corpus;
mod features;
mod sequence;
mod synth;
mod vocab;

pub use corpus::{
    build_examples, read_corpus, split_train_val, write_corpus, CorpusRecord, Example,
};
pub use features::{read_features, write_features, FeatureSet, ImageFeatures, SpatialGrid};
pub use sequence::TokenSeq;
pub use synth::{caption_for, synth_corpus, synth_corpus_with, Scene, SynthConfig, SynthCorpus, COLORS, OBJECTS, PLACES, RELATIONS};
pub use vocab::{tokenize, Vocabulary, END, START, UNK};
