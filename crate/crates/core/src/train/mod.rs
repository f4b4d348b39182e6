//! Surrogate-gradient training with SGD and momentum.

mod data;
mod gradcheck;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayView2, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{synth_dataset, Dataset, DatasetKind, Geometry};
pub use gradcheck::{grad_check, grad_check_with_step, GradCheckReport, GroupCheck, MIN_COSINE};

use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Record};
use crate::model::{repeat_over_time, Model, PassOptions, TensorRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the whole run.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "constant" => Some(LrSchedule::Constant),
            "cosine" => Some(LrSchedule::Cosine),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
}

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            loss: Loss::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParam(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        Ok(())
    }

    /// Learning rate for `step` of a run with `total_steps` steps.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

/// Mean cross-entropy of `logits` `[B, K]` and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = ((row[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) / b;
        }
    }
    (loss / b, grad)
}

/// Index of the first maximum of each row.
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

const EVAL_BATCH: usize = 64;

/// Fraction of samples whose time-averaged logits peak at the true label (inference mode).
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let t = model.config().timesteps;
    let mut hits = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = dataset.batch(chunk);
        let fwd = model.forward(repeat_over_time(images.view(), t).view(), PassOptions::inference(), None)?;
        hits += argmax_rows(fwd.logits.view()).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    velocity: Vec<ArrayD<f64>>,
    step: u64,
    epoch: usize,
    qkv_grad_seen: Vec<bool>,
}

const STATE_RECORD: &str = "__train_state";
const VELOCITY_PREFIX: &str = "__momentum.";

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = model.store().tensors().iter().map(|t| ArrayD::zeros(t.value.raw_dim())).collect();
        let blocks = model.config().blocks;
        Ok(Self { model, config, velocity, step: 0, epoch: 0, qkv_grad_seen: vec![false; blocks] })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One SGD-with-momentum update on `images` `[B, C, H, W]`. Returns the loss before the update.
    pub fn train_step(&mut self, images: ArrayView4<'_, f64>, labels: &[usize], lr: f64) -> Result<StepOutcome> {
        if labels.is_empty() || images.len_of(Axis(0)) != labels.len() {
            return Err(Error::Empty("training batch".into()));
        }
        let t = self.model.config().timesteps;
        let fwd = self.model.forward(repeat_over_time(images, t).view(), PassOptions::training(), None)?;
        let (loss, dlogits) = cross_entropy(fwd.logits.view(), labels);
        if !loss.is_finite() {
            let layer = fwd.first_non_finite.clone().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFiniteLoss { layer });
        }
        let acc = accuracy(fwd.logits.view(), labels);
        let grads = self.model.backward(fwd.cache.as_ref().expect("training pass keeps its cache"), dlogits.view())?;
        for (l, seen) in self.qkv_grad_seen.iter_mut().enumerate() {
            if !*seen {
                *seen = ["q", "k", "v"].iter().all(|p| {
                    let name = format!("blocks.{l}.attn.{p}.weight");
                    let i = self.model.store().tensors().iter().position(|t| t.name == name).expect("qkv weight");
                    grads.values[i].iter().any(|&g| g != 0.0)
                });
            }
        }
        self.model.apply_norm_stats(&fwd);
        for ((t, v), g) in self.model.store_mut().tensors_mut().iter_mut().zip(&mut self.velocity).zip(&grads.values) {
            if t.role != TensorRole::Weight {
                continue;
            }
            v.zip_mut_with(g, |v, &g| *v = MOMENTUM * *v + g);
            t.value.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
        self.model.round_to_f32();
        for v in &mut self.velocity {
            v.mapv_inplace(|x| x as f32 as f64);
        }
        self.step += 1;
        Ok(StepOutcome { loss, accuracy: acc, lr })
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// Sample order for `epoch`, a pure function of the seed and the epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch. Each step appends `step,epoch,loss,lr,accuracy` to `log`.
    pub fn train_epoch(&mut self, dataset: &Dataset, mut log: Option<&mut dyn Write>) -> Result<EpochSummary> {
        if dataset.is_empty() {
            return Err(Error::Empty("training dataset".into()));
        }
        let total = (self.batches_per_epoch(dataset.len()) * self.config.epochs) as u64;
        let order = self.epoch_order(dataset.len(), self.epoch);
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let (images, labels) = dataset.batch(chunk);
            let lr = self.config.lr_at(self.step, total);
            let out = self.train_step(images.view(), &labels, lr)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{},{},{},{},{}", self.step, self.epoch, out.loss, out.lr, out.accuracy)?;
            }
            loss_sum += out.loss * chunk.len() as f64;
            hits += out.accuracy * chunk.len() as f64;
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_loss: loss_sum / dataset.len() as f64,
            train_accuracy: hits / dataset.len() as f64,
        };
        self.epoch += 1;
        Ok(summary)
    }

    /// Blocks whose Q, K and V projections have not yet all received a nonzero gradient.
    pub fn dead_attention_blocks(&self) -> Vec<usize> {
        self.qkv_grad_seen.iter().enumerate().filter(|(_, s)| !**s).map(|(l, _)| l).collect()
    }

    /// Optimizer and position records stored next to the model tensors.
    pub fn state_records(&self) -> Vec<Record> {
        let mut out = vec![Record::from_slice(STATE_RECORD, &[self.epoch as f64, self.step as f64])];
        for (t, v) in self.model.store().tensors().iter().zip(&self.velocity) {
            if t.role == TensorRole::Weight {
                out.push(Record::from_array(format!("{VELOCITY_PREFIX}{}", t.name), v));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.model, &self.state_records(), path)
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let (model, extras) = checkpoint::load_checkpoint(path)?;
        let mut trainer = Self::new(model, config)?;
        for r in extras {
            if r.name == STATE_RECORD {
                if r.values.len() != 2 {
                    return Err(Error::Checkpoint("malformed training state".into()));
                }
                trainer.epoch = r.values[0] as usize;
                trainer.step = r.values[1] as u64;
            } else if let Some(name) = r.name.strip_prefix(VELOCITY_PREFIX) {
                let i = trainer
                    .model
                    .store()
                    .tensors()
                    .iter()
                    .position(|t| t.name == name)
                    .ok_or_else(|| Error::Checkpoint(format!("momentum for unknown tensor `{name}`")))?;
                if r.dims != trainer.velocity[i].shape() {
                    return Err(Error::Checkpoint(format!("momentum for `{name}` has dims {:?}", r.dims)));
                }
                trainer.velocity[i] = r.to_array();
            }
        }
        Ok(trainer)
    }
}
