use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Glu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialDims {
    pub grid: usize,
    pub channels: usize,
}

/// Shape and switches of the convolutional captioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Length of the global image feature.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    /// One entry per masked convolution layer.
    pub kernel_widths: Vec<usize>,
    pub max_steps: usize,
    pub dropout: bool,
    pub dropout_p: f64,
    pub weight_norm: bool,
    pub residual: bool,
    pub attention: bool,
    pub activation: Activation,
    pub spatial: Option<SpatialDims>,
}

impl ModelConfig {
    /// Full-size configuration: 4096-d fc7 input, 512-d embeddings and conv
    /// features, a 256-d bottleneck, 15 steps and 7×7×512 spatial features.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            feature_dim: 4096,
            embed_dim: 512,
            hidden_dim: 512,
            bottleneck_dim: 256,
            kernel_widths: vec![2, 3, 3],
            max_steps: 15,
            dropout: true,
            dropout_p: 0.1,
            weight_norm: true,
            residual: true,
            attention: true,
            activation: Activation::Glu,
            spatial: Some(SpatialDims {
                grid: 7,
                channels: 512,
            }),
        }
    }

    /// Small instance used for unit tests and gradient checks.
    pub fn tiny(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            feature_dim,
            embed_dim: 8,
            hidden_dim: 8,
            bottleneck_dim: 4,
            kernel_widths: vec![2, 3],
            max_steps: 4,
            dropout: false,
            dropout_p: 0.1,
            weight_norm: false,
            residual: false,
            attention: false,
            activation: Activation::Glu,
            spatial: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.kernel_widths.len()
    }

    /// Number of past tokens that can reach an output position.
    pub fn receptive_field(&self) -> usize {
        self.kernel_widths.iter().map(|k| k - 1).sum()
    }

    pub fn effective_dropout(&self) -> f64 {
        if self.dropout {
            self.dropout_p
        } else {
            0.0
        }
    }

    /// Output channels of each convolution before the activation.
    pub fn conv_out_channels(&self) -> usize {
        match self.activation {
            Activation::Glu => 2 * self.hidden_dim,
            Activation::Relu => self.hidden_dim,
        }
    }

    pub fn conv_in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("max_steps", self.max_steps),
            ("num_layers", self.kernel_widths.len()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.kernel_widths.contains(&0) {
            return Err(Error::Config("kernel widths must be >= 1".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocabulary needs the three reserved tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        if self.attention {
            match self.spatial {
                None => return Err(Error::Config("attention requires spatial dims".into())),
                Some(s) if s.grid == 0 || s.channels == 0 => {
                    return Err(Error::Config("spatial dims must be >= 1".into()))
                }
                // the attended vector is added to the post-activation features
                Some(s) if s.channels != self.hidden_dim => {
                    return Err(Error::Config(format!(
                        "attention needs spatial channels ({}) == hidden_dim ({})",
                        s.channels, self.hidden_dim
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (v, f, d, h, b) = (
            self.vocab_size,
            self.feature_dim,
            self.embed_dim,
            self.hidden_dim,
            self.bottleneck_dim,
        );
        let cout = self.conv_out_channels();
        let mut n = v * d + f * d + d;
        for (l, k) in self.kernel_widths.iter().enumerate() {
            n += k * self.conv_in_channels(l) * cout + cout;
            if self.weight_norm {
                n += cout;
            }
            if self.attention {
                n += h * self.spatial.map_or(0, |s| s.channels);
            }
        }
        n + h * b + b + b * v + v
    }
}

/// Shape of the LSTM baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_steps: usize,
}

impl LstmConfig {
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            feature_dim: 4096,
            embed_dim: 512,
            hidden_dim: 512,
            max_steps: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3
            || self.feature_dim == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.max_steps == 0
        {
            return Err(Error::Config(format!("invalid LSTM configuration {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (v, f, d, h) = (self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim);
        v * d + f * h + h + (d + h) * 4 * h + 4 * h + h * v + v
    }
}
