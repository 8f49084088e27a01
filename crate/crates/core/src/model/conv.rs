use super::config::{Activation, ModelConfig};
use super::params::{init_rng, site_seed, uniform_init, zeros_param, Bound, ParamSet};
use super::{check_global, check_ids, Captioner, ForwardMode, ModelKind};
use crate::data::{ImageFeatures, SpatialGrid};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const OUTPUT_PROJECTION: &str = "classifier.out.w";

/// Per-layer activations (after the activation, before attention and
/// residual) and attention maps from one forward pass.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub activations: Vec<Tensor>,
    /// `[T × G²]` per layer; empty when attention is off.
    pub attention: Vec<Tensor>,
}

/// Graph handles produced by [`CaptionModel::record`].
#[derive(Clone, Debug)]
pub struct Recorded {
    pub probs: Var,
    pub image: Var,
    pub activations: Vec<Var>,
    pub attention: Vec<Var>,
}

/// The feed-forward captioner: word and image embeddings, a stack of masked
/// convolutions and a bottleneck classifier.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    config: ModelConfig,
    params: ParamSet,
}

fn conv_names(layer: usize) -> (String, String, String, String) {
    (
        format!("conv{layer}.kernel"),
        format!("conv{layer}.v"),
        format!("conv{layer}.g"),
        format!("conv{layer}.bias"),
    )
}

/// Attention of every row of `d` (`[T×H]`) over the cells of `spatial`.
///
/// Scores are `(d W) · c_i` for each cell `c_i`, normalised with a softmax
/// over cells. Returns the attended vectors `[T×C]` and the weights `[T×G²]`.
pub fn attend(graph: &mut Graph, d: Var, w: Var, spatial: &SpatialGrid) -> Result<(Var, Var)> {
    attend_cells(graph, d, w, &spatial.data, spatial.cells(), spatial.channels)
}

/// [`attend`] over an explicit `[cells × channels]` matrix.
pub fn attend_cells(
    graph: &mut Graph,
    d: Var,
    w: Var,
    data: &[f64],
    cells: usize,
    channels: usize,
) -> Result<(Var, Var)> {
    let cells_var = graph.constant(&[cells, channels], data.to_vec())?;
    let mut transposed = vec![0.0; cells * channels];
    for i in 0..cells {
        for j in 0..channels {
            transposed[j * cells + i] = data[i * channels + j];
        }
    }
    let cells_t = graph.constant(&[channels, cells], transposed)?;
    let query = graph.matmul(d, w)?;
    let scores = graph.matmul(query, cells_t)?;
    let weights = graph.softmax(scores, 1)?;
    let context = graph.matmul(weights, cells_var)?;
    Ok((context, weights))
}

impl CaptionModel {
    /// Initialises parameters: uniform in ±1/sqrt(fan-in) for weights, zero
    /// biases and a zero output projection so the first predictions are uniform.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamSet::new();
        let (v, f, d, h, b) = (
            config.vocab_size,
            config.feature_dim,
            config.embed_dim,
            config.hidden_dim,
            config.bottleneck_dim,
        );
        params.insert("embed.word", uniform_init(&[v, d], v, &mut rng));
        params.insert("image.w", uniform_init(&[f, d], f, &mut rng));
        params.insert("image.b", zeros_param(&[d]));
        let cout = config.conv_out_channels();
        for (l, &k) in config.kernel_widths.iter().enumerate() {
            let cin = config.conv_in_channels(l);
            let (kernel, vname, gname, bias) = conv_names(l);
            let w = uniform_init(&[k, cin, cout], k * cin, &mut rng);
            if config.weight_norm {
                let mut norms = vec![0.0; cout];
                for row in w.data().chunks(cout) {
                    for (n, x) in norms.iter_mut().zip(row) {
                        *n += x * x;
                    }
                }
                let g = Tensor::new(vec![cout], norms.iter().map(|n| n.sqrt()).collect())?;
                params.insert(vname, w);
                params.insert(gname, g.requiring_grad());
            } else {
                params.insert(kernel, w);
            }
            params.insert(bias, zeros_param(&[cout]));
            if config.attention {
                let c = config.spatial.map_or(h, |s| s.channels);
                params.insert(format!("attn{l}.w"), uniform_init(&[h, c], h, &mut rng));
            }
        }
        params.insert("classifier.hidden.w", uniform_init(&[h, b], h, &mut rng));
        params.insert("classifier.hidden.b", zeros_param(&[b]));
        params.insert(OUTPUT_PROJECTION, zeros_param(&[b, v]));
        params.insert("classifier.out.b", zeros_param(&[v]));
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        check_layout(&template.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `linear(relu(dropout(global)))` as a `[1×D]` node.
    pub fn record_image(
        &self,
        graph: &mut Graph,
        p: &Bound,
        features: &ImageFeatures,
        mode: ForwardMode,
    ) -> Result<Var> {
        check_global(features, self.config.feature_dim)?;
        let global = graph.constant(&[1, self.config.feature_dim], features.global.clone())?;
        let dropped = graph.dropout(
            global,
            self.config.effective_dropout(),
            site_seed(mode.seed, 0),
            mode.train,
        )?;
        let act = graph.relu(dropped);
        let lin = graph.matmul(act, p.var("image.w"))?;
        graph.add_row(lin, p.var("image.b"))
    }

    pub fn embed_image(&self, features: &ImageFeatures, mode: ForwardMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = self.record_image(&mut g, &p, features, mode)?;
        let t = g.tensor(v);
        Tensor::new(vec![self.config.embed_dim], t.into_data())
    }

    /// Records the full teacher-forced pass over every position at once.
    pub fn record(
        &self,
        graph: &mut Graph,
        p: &Bound,
        input: &[usize],
        features: &ImageFeatures,
        mode: ForwardMode,
    ) -> Result<Recorded> {
        let cfg = &self.config;
        check_ids(input, cfg.vocab_size)?;
        let spatial = if cfg.attention {
            let s = features.spatial.as_ref().ok_or(Error::MissingSpatial)?;
            let dims = cfg.spatial.expect("validated config");
            if s.grid != dims.grid || s.channels != dims.channels {
                return Err(Error::Dimension {
                    op: "spatial_features",
                    lhs: vec![dims.grid, dims.grid, dims.channels],
                    rhs: vec![s.grid, s.grid, s.channels],
                });
            }
            Some(s)
        } else {
            None
        };
        let t_len = input.len();
        let p_drop = cfg.effective_dropout();

        let words = graph.embedding(p.var("embed.word"), input)?;
        let image = self.record_image(graph, p, features, mode)?;
        let image_rows = graph.broadcast_rows(image, t_len);
        let mut x = graph.concat(&[words, image_rows], 1)?;

        let mut activations = Vec::with_capacity(cfg.num_layers());
        let mut attention = Vec::new();
        for l in 0..cfg.num_layers() {
            let (kernel, vname, gname, bias) = conv_names(l);
            let xin = graph.dropout(x, p_drop, site_seed(mode.seed, l as u64 + 1), mode.train)?;
            let kernel = if cfg.weight_norm {
                graph.weight_norm(p.var(&vname), p.var(&gname))?
            } else {
                p.var(&kernel)
            };
            let conv = graph.causal_conv1d(xin, kernel, p.var(&bias))?;
            let act = match cfg.activation {
                Activation::Glu => graph.glu(conv)?,
                Activation::Relu => graph.relu(conv),
            };
            activations.push(act);
            let mut out = act;
            if let Some(s) = spatial {
                let (context, weights) = attend(graph, act, p.var(&format!("attn{l}.w")), s)?;
                attention.push(weights);
                out = graph.add(out, context)?;
            }
            if cfg.residual && l > 0 {
                out = graph.add(out, x)?;
            }
            x = out;
        }

        let hidden = graph.matmul(x, p.var("classifier.hidden.w"))?;
        let hidden = graph.add_row(hidden, p.var("classifier.hidden.b"))?;
        let logits = graph.matmul(hidden, p.var(OUTPUT_PROJECTION))?;
        let logits = graph.add_row(logits, p.var("classifier.out.b"))?;
        let probs = graph.softmax(logits, 1)?;
        Ok(Recorded {
            probs,
            image,
            activations,
            attention,
        })
    }

    /// Probabilities for every position of `input` plus the decoder state.
    pub fn forward_teacher_forced(
        &self,
        input: &[usize],
        features: &ImageFeatures,
        mode: ForwardMode,
    ) -> Result<(Tensor, DecoderState)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let rec = self.record(&mut g, &p, input, features, mode)?;
        let state = DecoderState {
            activations: rec.activations.iter().map(|&v| g.tensor(v)).collect(),
            attention: rec.attention.iter().map(|&v| g.tensor(v)).collect(),
        };
        Ok((g.tensor(rec.probs), state))
    }
}

pub(crate) fn check_layout(template: &ParamSet, actual: &ParamSet) -> Result<()> {
    for (name, t) in template.iter() {
        let got = actual
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if actual.len() != template.len() {
        return Err(Error::Checkpoint("unexpected extra parameters".into()));
    }
    Ok(())
}

impl Captioner for CaptionModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
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
        mode: ForwardMode,
    ) -> Result<Var> {
        Ok(self.record(graph, params, input, features, mode)?.probs)
    }

    fn output_projection_param(&self) -> &'static str {
        OUTPUT_PROJECTION
    }
}
