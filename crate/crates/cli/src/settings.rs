//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use convcap::model::{Activation, LstmConfig, ModelConfig, ModelSpec, SpatialDims};
use convcap::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Cnn,
    CnnAttn,
    Lstm,
}

const MODEL_KEYS: [&str; 11] = [
    "embed_dim",
    "hidden_dim",
    "bottleneck_dim",
    "kernel_widths",
    "max_steps",
    "dropout",
    "dropout_p",
    "weight_norm",
    "residual",
    "attention",
    "activation",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub min_count: usize,
    model: BTreeMap<String, String>,
    /// Every key as given, for the manifest.
    pub echo: BTreeMap<String, String>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("bad value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => bail!("`{key}` expects true/false, got `{value}`"),
    }
}

impl Settings {
    pub fn new() -> Self {
        Self {
            val_fraction: 0.1,
            min_count: 1,
            ..Self::default()
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::new()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key = value", n + 1);
            };
            s.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
        } else if key == "val_fraction" {
            self.val_fraction = parse(key, value)?;
            if !(0.0..1.0).contains(&self.val_fraction) {
                bail!("val_fraction must lie in [0, 1)");
            }
        } else if key == "min_count" {
            self.min_count = parse(key, value)?;
        } else if MODEL_KEYS.contains(&key) {
            self.model.insert(key.to_string(), value.to_string());
        } else {
            bail!("unknown config key `{key}`");
        }
        self.echo.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn model_usize(&self, key: &str) -> Result<Option<usize>> {
        self.model.get(key).map(|v| parse(key, v)).transpose()
    }

    fn model_bool(&self, key: &str) -> Result<Option<bool>> {
        self.model.get(key).map(|v| parse_bool(key, v)).transpose()
    }

    /// Resolves the model configuration against the data's dimensions.
    pub fn model_spec(
        &self,
        choice: ModelChoice,
        vocab_size: usize,
        feature_dim: usize,
        spatial: Option<SpatialDims>,
    ) -> Result<ModelSpec> {
        if choice == ModelChoice::Lstm {
            let mut c = LstmConfig::full(vocab_size);
            c.feature_dim = feature_dim;
            if let Some(v) = self.model_usize("embed_dim")? {
                c.embed_dim = v;
            }
            if let Some(v) = self.model_usize("hidden_dim")? {
                c.hidden_dim = v;
            }
            if let Some(v) = self.model_usize("max_steps")? {
                c.max_steps = v;
            }
            for k in self.model.keys() {
                if !["embed_dim", "hidden_dim", "max_steps"].contains(&k.as_str()) {
                    log::warn!("`{k}` does not apply to the LSTM baseline; ignored");
                }
            }
            c.validate()?;
            return Ok(ModelSpec::Lstm(c));
        }
        let mut c = ModelConfig::full(vocab_size);
        c.feature_dim = feature_dim;
        c.spatial = spatial;
        c.attention = choice == ModelChoice::CnnAttn;
        if let Some(v) = self.model_usize("embed_dim")? {
            c.embed_dim = v;
        }
        if let Some(v) = self.model_usize("hidden_dim")? {
            c.hidden_dim = v;
        }
        if let Some(v) = self.model_usize("bottleneck_dim")? {
            c.bottleneck_dim = v;
        }
        if let Some(v) = self.model_usize("max_steps")? {
            c.max_steps = v;
        }
        if let Some(v) = self.model.get("kernel_widths") {
            c.kernel_widths = v
                .split(',')
                .map(|k| parse("kernel_widths", k.trim()))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = self.model.get("dropout_p") {
            c.dropout_p = parse("dropout_p", v)?;
        }
        if let Some(v) = self.model_bool("dropout")? {
            c.dropout = v;
        }
        if let Some(v) = self.model_bool("weight_norm")? {
            c.weight_norm = v;
        }
        if let Some(v) = self.model_bool("residual")? {
            c.residual = v;
        }
        if let Some(v) = self.model_bool("attention")? {
            if v != c.attention {
                log::warn!("config sets attention = {v}, overriding the --model choice");
            }
            c.attention = v;
        }
        if let Some(v) = self.model.get("activation") {
            c.activation = match v.as_str() {
                "glu" => Activation::Glu,
                "relu" => Activation::Relu,
                _ => bail!("activation must be glu or relu, got `{v}`"),
            };
        }
        if c.attention && spatial.is_none() {
            bail!("attention needs spatial features but the feature file has none");
        }
        if !c.attention {
            c.spatial = None;
        }
        c.validate()?;
        Ok(ModelSpec::Cnn(c))
    }
}
