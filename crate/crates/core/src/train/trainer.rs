use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossReduction;
use super::optim::{staircase_lr, RmsProp};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, metrics_csv, AnalysisRecord};
use crate::model::{site_seed, AnyModel, Captioner, Checkpoint, CheckpointMeta, ForwardMode};
use crate::tensor::Graph;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` completed epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub seed: u64,
    /// Analysis records are emitted every this many epochs (and after the last).
    pub eval_every: usize,
    /// Training examples used for the gradient-norm probe.
    pub probe_size: usize,
    pub loss: LossReduction,
    /// Stop once teacher-forced training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            decay: 0.1,
            decay_every: 15,
            epochs: 30,
            batch_size: 32,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            seed: 0,
            eval_every: 1,
            probe_size: 16,
            loss: LossReduction::Mean,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.eval_every == 0 || self.probe_size == 0 {
            return bad("batch_size, decay_every, eval_every and probe_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.rms_alpha) || self.rms_eps.is_nan() || self.rms_eps <= 0.0 {
            return bad("rms_alpha must lie in [0, 1) and rms_eps must be > 0");
        }
        Ok(())
    }

    /// Learning rate in force after `completed_epochs` epochs.
    pub fn lr_at(&self, completed_epochs: usize) -> f64 {
        staircase_lr(self.learning_rate, self.decay, self.decay_every, completed_epochs)
    }

    /// Sets one field from its textual form; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "rms_alpha" => self.rms_alpha = parse(key, value)?,
            "rms_eps" => self.rms_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "probe_size" => self.probe_size = parse(key, value)?,
            "loss" => {
                self.loss = match value {
                    "mean" => LossReduction::Mean,
                    "sum" => LossReduction::Sum,
                    _ => return Err(Error::Config(format!("loss must be mean or sum, got `{value}`"))),
                }
            }
            "target_accuracy" => {
                self.target_accuracy = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean training loss of each epoch run, in order.
    pub epoch_losses: Vec<f64>,
    pub records: Vec<AnalysisRecord>,
    /// `(epoch, loss)` of the best evaluated checkpoint.
    pub best: Option<(usize, f64)>,
    /// Completed epochs, counting any resumed ones.
    pub epochs_completed: usize,
    pub stopped_early: bool,
    pub optimizer: RmsProp,
    pub clamp_events: usize,
}

/// Minibatch teacher-forced training with RMSProp and a staircase schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    out_dir: Option<PathBuf>,
    start_epoch: usize,
    optimizer: Option<RmsProp>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            out_dir: None,
            start_epoch: 0,
            optimizer: None,
        }
    }

    /// Writes `metrics.csv`, `last.ckpt` and `best.ckpt` under `dir`.
    pub fn output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Continues from a checkpoint's epoch count and optimizer state. The
    /// model itself is taken from the checkpoint by the caller.
    pub fn resume_from(mut self, ck: &Checkpoint) -> Self {
        self.start_epoch = ck.meta.epoch;
        let mut opt = RmsProp::new(self.config.rms_alpha, self.config.rms_eps);
        opt.accumulators = ck.optimizer.clone();
        opt.steps = ck.meta.optimizer_steps;
        self.optimizer = Some(opt);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn checkpoint(&self, model: &AnyModel, opt: &RmsProp, epoch: usize) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(
            model.clone(),
            CheckpointMeta {
                seed: self.config.seed,
                epoch,
                optimizer_steps: opt.steps,
                train: Some(serde_json::to_value(&self.config)?),
            },
        );
        ck.optimizer = opt.accumulators.clone();
        Ok(ck)
    }

    fn save(&self, ck: &Checkpoint, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            ck.save(&dir.join(name))
                .map_err(|e| Error::Checkpoint(format!("writing {name}: {e}")))?;
        }
        Ok(())
    }

    /// One pass over `train` in the epoch's shuffled order. Returns the mean
    /// per-example loss.
    fn run_epoch(
        &self,
        model: &mut AnyModel,
        train: &[Example],
        opt: &mut RmsProp,
        epoch: usize,
        clamps: &mut usize,
    ) -> Result<f64> {
        let cfg = &self.config;
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(site_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        let epoch_seed = site_seed(cfg.seed ^ DROPOUT_STREAM, epoch as u64);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let mut batch_loss = None;
            for (j, &i) in chunk.iter().enumerate() {
                let ex = &train[i];
                let vl = ex.seq.valid_len;
                let mode = ForwardMode::train(site_seed(epoch_seed, (b * cfg.batch_size + j) as u64));
                // causal models: rows past valid_len never influence earlier rows
                let probs = model.record_probs(&mut g, &p, &ex.seq.input[..vl], &ex.features, mode)?;
                let w = cfg.loss.weight(vl) / chunk.len() as f64;
                let l = g.nll(probs, &ex.seq.target[..vl], w)?;
                batch_loss = Some(match batch_loss {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let loss = batch_loss.expect("chunks are non-empty");
            g.backward(loss)?;
            let grads = model.params().gradients(&g, &p);
            opt.step(model.params_mut(), &grads, lr)?;
            total += g.value(loss)[0] * chunk.len() as f64;
            *clamps += g.clamp_events();
        }
        Ok(total / train.len() as f64)
    }

    pub fn run(&self, model: &mut AnyModel, train: &[Example], val: &[Example]) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut opt = self
            .optimizer
            .clone()
            .unwrap_or_else(|| RmsProp::new(cfg.rms_alpha, cfg.rms_eps));
        let probe = &train[..cfg.probe_size.min(train.len())];
        let mut out = TrainOutcome {
            epoch_losses: Vec::new(),
            records: Vec::new(),
            best: None,
            epochs_completed: self.start_epoch,
            stopped_early: false,
            optimizer: opt.clone(),
            clamp_events: 0,
        };
        for epoch in self.start_epoch..cfg.epochs {
            let loss = self.run_epoch(model, train, &mut opt, epoch, &mut out.clamp_events)?;
            out.epoch_losses.push(loss);
            let done = epoch + 1;
            out.epochs_completed = done;
            log::debug!("epoch {done}: train loss {loss:.6} lr {:e}", opt.lr);
            if done % cfg.eval_every != 0 && done != cfg.epochs {
                continue;
            }
            let tr = evaluate_split(&*model, train, probe, done, "train")?;
            let reached = cfg.target_accuracy.is_some_and(|t| tr.accuracy >= t);
            let mut score = tr.loss;
            out.records.push(tr);
            if !val.is_empty() {
                let va = evaluate_split(&*model, val, probe, done, "val")?;
                score = va.loss;
                out.records.push(va);
            }
            log::info!("epoch {done}: {}", crate::eval::metrics_row(out.records.last().unwrap()));
            let ck = self.checkpoint(model, &opt, done)?;
            self.save(&ck, "last.ckpt")?;
            if out.best.is_none_or(|(_, b)| score < b) {
                out.best = Some((done, score));
                self.save(&ck, "best.ckpt")?;
            }
            if let Some(dir) = &self.out_dir {
                fs::write(dir.join("metrics.csv"), metrics_csv(&out.records))?;
            }
            if reached {
                out.stopped_early = true;
                break;
            }
        }
        out.optimizer = opt;
        if out.clamp_events > 0 {
            log::warn!("{} target probabilities were floored during training", out.clamp_events);
        }
        Ok(out)
    }
}

/// Trains `model` with default outputs (none).
pub fn train(model: &mut AnyModel, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone()).run(model, train, val)
}

/// Path of the checkpoint a run directory keeps for its best epoch.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}
