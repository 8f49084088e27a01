//! Caption models: the masked-convolution captioner and the LSTM baseline.

mod checkpoint;
mod config;
mod conv;
mod lstm;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelSpec};
pub use config::{Activation, LstmConfig, ModelConfig, SpatialDims};
pub use conv::{attend, attend_cells, CaptionModel, DecoderState, Recorded};
pub use lstm::{LstmModel, LstmState};
pub use params::{Bound, Gradients, ParamSet};

pub use params::site_seed;

use crate::data::{ImageFeatures, START};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Lstm,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
        }
    }
}

/// Whether a forward pass runs in training mode and which dropout stream it uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        train: false,
        seed: 0,
    };

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Behaviour shared by every caption model: a teacher-forced forward pass
/// recorded into a graph, plus the inference helpers built on top of it.
pub trait Captioner {
    fn kind(&self) -> ModelKind;
    fn vocab_size(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the forward pass over `input` (an `<S>`-prefixed id sequence)
    /// and returns the `[T × |Y|]` probability node.
    fn record_probs(
        &self,
        graph: &mut Graph,
        params: &Bound,
        input: &[usize],
        features: &ImageFeatures,
        mode: ForwardMode,
    ) -> Result<Var>;

    /// Word-embedding table at the input side.
    fn input_embedding_param(&self) -> &'static str {
        "embed.word"
    }

    /// Final projection onto the vocabulary.
    fn output_projection_param(&self) -> &'static str;

    /// Teacher-forced probabilities without gradient tracking.
    fn probs(&self, input: &[usize], features: &ImageFeatures, mode: ForwardMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false);
        let out = self.record_probs(&mut g, &p, input, features, mode)?;
        Ok(g.tensor(out))
    }

    /// Distribution of the next word after `<S>` followed by `prefix`.
    fn next_token_probs(&self, features: &ImageFeatures, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(START);
        input.extend_from_slice(prefix);
        let probs = self.probs(&input, features, ForwardMode::EVAL)?;
        Ok(probs.row(input.len() - 1).to_vec())
    }
}

/// Either model kind, as restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Cnn(CaptionModel),
    Lstm(LstmModel),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Cnn($m) => $e,
            AnyModel::Lstm($m) => $e,
        }
    };
}

impl Captioner for AnyModel {
    fn kind(&self) -> ModelKind {
        delegate!(self, m => m.kind())
    }
    fn vocab_size(&self) -> usize {
        delegate!(self, m => m.vocab_size())
    }
    fn max_steps(&self) -> usize {
        delegate!(self, m => m.max_steps())
    }
    fn params(&self) -> &ParamSet {
        delegate!(self, m => m.params())
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        delegate!(self, m => m.params_mut())
    }
    fn record_probs(
        &self,
        graph: &mut Graph,
        params: &Bound,
        input: &[usize],
        features: &ImageFeatures,
        mode: ForwardMode,
    ) -> Result<Var> {
        delegate!(self, m => m.record_probs(graph, params, input, features, mode))
    }
    fn output_projection_param(&self) -> &'static str {
        delegate!(self, m => m.output_projection_param())
    }
}

impl AnyModel {
    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::Cnn(m) => ModelSpec::Cnn(m.config().clone()),
            AnyModel::Lstm(m) => ModelSpec::Lstm(m.config().clone()),
        }
    }

    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Cnn(c) => AnyModel::Cnn(CaptionModel::new(c.clone(), seed)?),
            ModelSpec::Lstm(c) => AnyModel::Lstm(LstmModel::new(c.clone(), seed)?),
        })
    }
}

pub(crate) fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(Error::OutOfVocabulary { id, size: vocab }),
        None => Ok(()),
    }
}

pub(crate) fn check_global(features: &ImageFeatures, dim: usize) -> Result<()> {
    if let Some(index) = features.first_non_finite() {
        return Err(Error::InvalidFeature { index });
    }
    if features.global.len() != dim {
        return Err(Error::Dimension {
            op: "image_features",
            lhs: vec![dim],
            rhs: vec![features.global.len()],
        });
    }
    Ok(())
}
