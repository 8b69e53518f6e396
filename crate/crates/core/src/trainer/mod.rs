//! Training protocol: cross-entropy, Adam with a one-cycle schedule, early
//! stopping on validation balanced accuracy, and evaluation.

pub mod adam;
pub mod augment;
pub mod metrics;
pub mod schedule;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureHierarchy;
use crate::checkpoint::Snapshot;
use crate::error::{Error, Result};
use crate::model::{DuoFormer, ModelInput};
use crate::nn::{Mode, Module};
use crate::rng::{mix_seed, Rng};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

pub use adam::{Adam, AdamConfig};
pub use augment::{augment, AugmentConfig, Image};
pub use metrics::{balanced_accuracy, confusion_matrix, EvalReport};
pub use schedule::{onecycle_lr, LrSchedule, OneCycleConfig};

/// Mean of `−log softmax(logits)[label]` over the batch.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    logits.softmax_cross_entropy(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 50,
            patience: 20,
            seed: 0,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            weight_decay: 0.0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::Config("weight decay is fixed at 0".into()));
        }
        Ok(())
    }
}

/// A batch of model inputs.
#[derive(Clone, Debug)]
pub enum Inputs<T: Scalar> {
    /// `[n, C, H, W]`.
    Images(Tensor<T>),
    Hierarchies(FeatureHierarchy<T>),
}

fn select_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(shape, data)
}

impl<T: Scalar> Inputs<T> {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Images(t) => t.dim(0),
            Inputs::Hierarchies(h) => h.batch(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Result<Inputs<T>> {
        Ok(match self {
            Inputs::Images(t) => Inputs::Images(select_rows(t, idx)?),
            Inputs::Hierarchies(h) => Inputs::Hierarchies(FeatureHierarchy {
                stages: h.stages.iter().map(|s| select_rows(s, idx)).collect::<Result<_>>()?,
            }),
        })
    }

    pub fn as_model_input(&self) -> ModelInput<'_, T> {
        match self {
            Inputs::Images(t) => ModelInput::Image(t),
            Inputs::Hierarchies(h) => ModelInput::Hierarchy(h),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Split<T: Scalar> {
    pub inputs: Inputs<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn new(inputs: Inputs<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Config(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        Ok(Split { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Split<T>> {
        Ok(Split {
            inputs: self.inputs.select(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Consecutive chunks of `order`; a trailing single-sample chunk is merged
/// into the previous one so batch statistics always see two samples.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn augment_batch<T: Scalar>(inputs: Inputs<T>, idx: &[usize], epoch: usize, cfg: &TrainConfig) -> Result<Inputs<T>> {
    let (Some(aug), Inputs::Images(t)) = (&cfg.augment, &inputs) else {
        return Ok(inputs);
    };
    let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
    let plane = c * h * w;
    let mut data = Vec::new();
    let mut side = h;
    for (k, &i) in idx.iter().enumerate() {
        let raw = t.data()[k * plane..(k + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let seed = mix_seed(cfg.seed, format!("augment/{epoch}/{i}").as_bytes());
        let out = augment(&Image::new(c, h, w, raw)?, seed, aug)?;
        side = out.height;
        data.extend(out.data.into_iter().map(T::lit));
    }
    Ok(Inputs::Images(Tensor::from_vec(vec![idx.len(), c, side, side], data)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_acc: f64,
    pub lr: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub best: Snapshot<T>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<EpochRecord>,
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &DuoFormer<T>, split: &Split<T>, batch_size: usize) -> Result<EvalReport> {
    let _guard = no_grad();
    let order: Vec<usize> = (0..split.len()).collect();
    let mut preds = Vec::with_capacity(split.len());
    let mut loss = 0.0;
    for idx in order.chunks(batch_size.max(1)) {
        let batch = split.select(idx)?;
        let (logits, _) = model.forward(batch.inputs.as_model_input(), Mode::Eval)?;
        loss += cross_entropy(&logits, &batch.labels)?.item().as_f64() * idx.len() as f64;
        preds.extend(argmax_rows(&logits));
    }
    EvalReport::new(&split.labels, &preds, model.n_classes(), loss / split.len().max(1) as f64)
}

/// Trains until `patience` epochs pass without a strictly better validation
/// balanced accuracy, or `max_epochs` is reached, then restores the best
/// parameters into `model`.
pub fn train_loop<T: Scalar>(
    model: &mut DuoFormer<T>,
    train: &Split<T>,
    val: &Split<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    let mut adam = Adam::new(cfg.adam, &model.trainable_params());
    let per_epoch = batches(&(0..train.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let total = per_epoch * cfg.max_epochs;
    let mut history = Vec::new();
    let mut best: Option<(Snapshot<T>, usize, f64)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derived(cfg.seed, &format!("shuffle/{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in batches(&order, cfg.batch_size) {
            let batch = train.select(&idx)?;
            let inputs = augment_batch(batch.inputs, &idx, epoch, cfg)?;
            model.zero_grad();
            let (logits, _) = model.forward(inputs.as_model_input(), Mode::Train)?;
            let loss = cross_entropy(&logits, &batch.labels)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            loss.backward()?;
            lr = cfg.schedule.lr(step, total)?;
            adam.step(model, lr)?;
            loss_sum += value * idx.len() as f64;
            step += 1;
        }
        let report = evaluate(model, val, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: report.loss,
            val_balanced_acc: report.balanced_accuracy,
            lr,
        });
        if best.as_ref().is_none_or(|(_, _, s)| report.balanced_accuracy > *s) {
            best = Some((Snapshot::capture(model), epoch, report.balanced_accuracy));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (snapshot, best_epoch, best_score) = best.expect("at least one epoch ran");
    snapshot.restore(model)?;
    Ok(TrainOutcome {
        best: snapshot,
        best_epoch,
        best_score,
        history,
    })
}

#[cfg(test)]
mod tests;
