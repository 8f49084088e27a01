use super::config::LstmConfig;
use super::conv::check_layout;
use super::params::{init_rng, uniform_init, zeros_param, Bound, ParamSet};
use super::{check_global, check_ids, Captioner, ForwardMode, ModelKind};
use crate::data::ImageFeatures;
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

const OUTPUT_PROJECTION: &str = "out.w";

/// Hidden state and memory cell, each `[1×H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Tensor,
    pub memory: Tensor,
}

/// Single-layer LSTM captioner. The image only enters through the initial
/// hidden state, `h0 = linear(relu(global))`, with `m0 = 0`.
#[derive(Clone, Debug)]
pub struct LstmModel {
    config: LstmConfig,
    params: ParamSet,
}

impl LstmModel {
    pub fn new(config: LstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let (v, f, d, h) = (
            config.vocab_size,
            config.feature_dim,
            config.embed_dim,
            config.hidden_dim,
        );
        let mut params = ParamSet::new();
        params.insert("embed.word", uniform_init(&[v, d], v, &mut rng));
        params.insert("image.w", uniform_init(&[f, h], f, &mut rng));
        params.insert("image.b", zeros_param(&[h]));
        // gate order along the columns: input, forget, output, candidate
        params.insert("lstm.w", uniform_init(&[d + h, 4 * h], d + h, &mut rng));
        params.insert("lstm.b", zeros_param(&[4 * h]));
        params.insert(OUTPUT_PROJECTION, zeros_param(&[h, v]));
        params.insert("out.b", zeros_param(&[v]));
        Ok(Self { config, params })
    }

    pub fn from_params(config: LstmConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    /// Records `(h0, m0)` for an image.
    pub fn record_initial(
        &self,
        graph: &mut Graph,
        p: &Bound,
        features: &ImageFeatures,
    ) -> Result<(Var, Var)> {
        check_global(features, self.config.feature_dim)?;
        let global = graph.constant(&[1, self.config.feature_dim], features.global.clone())?;
        let act = graph.relu(global);
        let lin = graph.matmul(act, p.var("image.w"))?;
        let hidden = graph.add_row(lin, p.var("image.b"))?;
        let memory = graph.constant(&[1, self.config.hidden_dim], vec![0.0; self.config.hidden_dim])?;
        Ok((hidden, memory))
    }

    /// One recurrence step: returns `(h', m', probs)` nodes.
    pub fn record_step(
        &self,
        graph: &mut Graph,
        p: &Bound,
        hidden: Var,
        memory: Var,
        token: usize,
    ) -> Result<(Var, Var, Var)> {
        check_ids(&[token], self.config.vocab_size)?;
        let h = self.config.hidden_dim;
        let word = graph.embedding(p.var("embed.word"), &[token])?;
        let joined = graph.concat(&[word, hidden], 1)?;
        let z = graph.matmul(joined, p.var("lstm.w"))?;
        let z = graph.add_row(z, p.var("lstm.b"))?;
        let gate = |g: &mut Graph, k: usize| g.slice(z, 1, k * h, h);
        let input_gate = gate(graph, 0)?;
        let input_gate = graph.sigmoid(input_gate);
        let forget_gate = gate(graph, 1)?;
        let forget_gate = graph.sigmoid(forget_gate);
        let output_gate = gate(graph, 2)?;
        let output_gate = graph.sigmoid(output_gate);
        let candidate = gate(graph, 3)?;
        let candidate = graph.tanh(candidate);
        let kept = graph.mul(forget_gate, memory)?;
        let written = graph.mul(input_gate, candidate)?;
        let memory = graph.add(kept, written)?;
        let squashed = graph.tanh(memory);
        let hidden = graph.mul(output_gate, squashed)?;
        let logits = graph.matmul(hidden, p.var(OUTPUT_PROJECTION))?;
        let logits = graph.add_row(logits, p.var("out.b"))?;
        let probs = graph.softmax(logits, 1)?;
        Ok((hidden, memory, probs))
    }

    pub fn initial_state(&self, features: &ImageFeatures) -> Result<LstmState> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (h, m) = self.record_initial(&mut g, &p, features)?;
        Ok(LstmState {
            hidden: g.tensor(h),
            memory: g.tensor(m),
        })
    }

    /// Advances the recurrence by one token.
    pub fn step(&self, state: &LstmState, token: usize) -> Result<(LstmState, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let h = g.leaf(&state.hidden);
        let m = g.leaf(&state.memory);
        let (h, m, probs) = self.record_step(&mut g, &p, h, m, token)?;
        let probs = g.tensor(probs);
        Ok((
            LstmState {
                hidden: g.tensor(h),
                memory: g.tensor(m),
            },
            Tensor::new(vec![self.config.vocab_size], probs.into_data())?,
        ))
    }

    /// Sequential teacher-forced unroll over `input`; one row per position.
    pub fn forward_teacher_forced(&self, input: &[usize], features: &ImageFeatures) -> Result<Tensor> {
        self.probs(input, features, ForwardMode::EVAL)
    }
}

impl Captioner for LstmModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn record_probs(
        &self,
        graph: &mut Graph,
        params: &Bound,
        input: &[usize],
        features: &ImageFeatures,
        _mode: ForwardMode,
    ) -> Result<Var> {
        check_ids(input, self.config.vocab_size)?;
        let (mut h, mut m) = self.record_initial(graph, params, features)?;
        let mut rows = Vec::with_capacity(input.len());
        for &token in input {
            let (h2, m2, probs) = self.record_step(graph, params, h, m, token)?;
            h = h2;
            m = m2;
            rows.push(probs);
        }
        graph.concat(&rows, 0)
    }

    fn output_projection_param(&self) -> &'static str {
        OUTPUT_PROJECTION
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::START;
    use crate::error::Error;

    fn cfg() -> LstmConfig {
        LstmConfig {
            vocab_size: 7,
            feature_dim: 5,
            embed_dim: 8,
            hidden_dim: 8,
            max_steps: 4,
        }
    }

    fn feats() -> ImageFeatures {
        ImageFeatures {
            global: vec![0.5, -0.3, 1.2, 0.0, 0.8],
            spatial: None,
        }
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut m = LstmModel::new(cfg(), 1).unwrap();
        for (_, t) in m.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = m.initial_state(&feats()).unwrap();
        let (_, p) = m.step(&s, START).unwrap();
        assert!(p.data().iter().all(|&x| x == 1.0 / 7.0));
    }

    #[test]
    fn step_is_a_pure_function() {
        let m = LstmModel::new(cfg(), 2).unwrap();
        let s = m.initial_state(&feats()).unwrap();
        let a = m.step(&s, 3).unwrap();
        let b = m.step(&s, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_vocabulary_step() {
        let m = LstmModel::new(cfg(), 2).unwrap();
        let s = m.initial_state(&feats()).unwrap();
        assert!(matches!(m.step(&s, 7), Err(Error::OutOfVocabulary { .. })));
    }

    #[test]
    fn param_count_matches_config() {
        let m = LstmModel::new(cfg(), 0).unwrap();
        assert_eq!(m.params().count(), cfg().param_count());
    }
}
