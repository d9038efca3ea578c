//! Deterministic single-sample training loop.

use std::fmt::Write as _;

use crate::blocks::Forward;
use crate::checkpoint::Checkpoint;
use crate::data::augment::{augment, AugmentationConfig};
use crate::data::sampler::BalancedSampler;
use crate::data::synth::splitmix64;
use crate::data::SegmentationSample;
use crate::error::{invalid, Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamState, PlateauConfig, PlateauController};
use crate::tape::Mode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau: PlateauConfig,
    pub max_epochs: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Applied to training samples only; `None` trains on the raw samples.
    pub augmentation: Option<AugmentationConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            plateau: PlateauConfig::default(),
            max_epochs: 150,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            augmentation: Some(AugmentationConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        self.plateau.validate()?;
        self.weights.validate()?;
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u32,
    /// Mean total loss over the epoch's training steps.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        writeln!(out, "{},{},{},{}", h.epoch, h.train_loss, h.val_loss, h.lr).expect("writing to a String");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Model<T>,
    pub best_epoch: u32,
    pub last: Model<T>,
    pub adam: AdamState<T>,
    pub history: Vec<EpochRecord>,
    pub early_stopped: bool,
}

impl<T: Real> TrainOutcome<T> {
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.best, None, &self.history)
    }

    pub fn last_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.last, Some(&self.adam), &self.history)
    }
}

fn image_and_target<T: Real>(sample: &SegmentationSample) -> (Tensor<T>, Vec<T>) {
    (sample.image.cast(), sample.mask.to_values())
}

/// One forward/backward/update on a single sample. Returns the loss before
/// the update.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    sample: &SegmentationSample,
    weights: LossWeights,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let (image, target) = image_and_target::<T>(sample);
    let (loss, grads, updates) = {
        let mut f = Forward::new(&model.store, Mode::Train, dropout_seed);
        let x = f.input(image);
        let out = model.cascade_forward(&mut f, x)?;
        let loss = total_loss(&mut f.tape, out.coarse, out.fine, &target, weights)?;
        let (tape, updates) = f.into_parts();
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value} on sample {} ({})", sample.id, sample.view)));
        }
        (value, tape.backward(loss)?, updates)
    };
    model.store.zero_grads();
    model.store.accumulate_grads(&grads)?;
    adam.update(&mut model.store, lr)?;
    Forward::commit_bn_updates(&updates, &mut model.store);
    Ok(loss)
}

/// Mean evaluation-mode total loss over `samples`.
pub fn validation_loss<T: Real>(model: &Model<T>, samples: &[SegmentationSample], weights: LossWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid!("validation split is empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let (image, target) = image_and_target::<T>(s);
        let mut f = Forward::new(&model.store, Mode::Eval, 0);
        let x = f.input(image);
        let out = model.cascade_forward(&mut f, x)?;
        let loss = total_loss(&mut f.tape, out.coarse, out.fine, &target, weights)?;
        total += f.tape.value(loss).data()[0].as_f64();
    }
    let mean = total / samples.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("validation loss {mean}")));
    }
    Ok(mean)
}

fn step_seed(seed: u64, epoch: u64, step: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64((epoch << 32 | step) ^ stream.rotate_left(56)))
}

/// Trains `model` until early stopping, `max_epochs`, or `on_epoch` returns
/// [`Control::Stop`]. The callback sees each epoch record and the model as it
/// stands after that epoch.
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>) -> Control,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(invalid!("validation split is empty"));
    }
    let views: Vec<_> = train_set.iter().map(|s| s.view).collect();
    let sampler = BalancedSampler::new(&views, cfg.seed)?;
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let mut plateau = PlateauController::new(cfg.plateau, cfg.lr0);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut early_stopped = false;

    for epoch in 1..=cfg.max_epochs as u64 {
        let lr = plateau.lr();
        let order = sampler.epoch(epoch);
        let mut sum = 0.0;
        for (step, &idx) in order.iter().enumerate() {
            let step = step as u64;
            let sample = match &cfg.augmentation {
                Some(a) => augment(&train_set[idx], a, step_seed(cfg.seed, epoch, step, 1)),
                None => train_set[idx].clone(),
            };
            sum += train_step(&mut model, &mut adam, &sample, cfg.weights, lr, step_seed(cfg.seed, epoch, step, 2))?;
        }
        let val_loss = validation_loss(&model, val_set, cfg.weights)?;
        let record = EpochRecord { epoch: epoch as u32, train_loss: sum / order.len() as f64, val_loss, lr };
        history.push(record);
        let decision = plateau.observe(val_loss);
        if decision.improved {
            best = model.clone();
            best_epoch = record.epoch;
        }
        if on_epoch(&record, &model) == Control::Stop {
            break;
        }
        if decision.stop {
            early_stopped = true;
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, last: model, adam, history, early_stopped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_sample;
    use crate::data::{Quality, View};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 2,
            channels: vec![2, 4],
            recurrence: vec![1, 1],
            input_size: 32,
            ..ModelConfig::desk()
        }
    }

    fn samples() -> Vec<SegmentationSample> {
        View::ALL.iter().map(|&v| generate_sample(5, v, 32, Quality::High).unwrap()).collect()
    }

    #[test]
    fn history_is_reproducible() {
        let cfg = TrainConfig { max_epochs: 2, lr0: 1e-3, seed: 4, ..Default::default() };
        let s = samples();
        let run = || train(Model::<f32>::build(&tiny()).unwrap(), &s, &s, &cfg, |_, _| Control::Continue).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.store.flat_trainable(), b.last.store.flat_trainable());
    }

    #[test]
    fn callback_can_stop() {
        let cfg = TrainConfig { max_epochs: 5, augmentation: None, ..Default::default() };
        let s = samples();
        let out = train(Model::<f32>::build(&tiny()).unwrap(), &s, &s, &cfg, |_, _| Control::Stop).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(!out.early_stopped);
        assert!(train(Model::<f32>::build(&tiny()).unwrap(), &[], &s, &cfg, |_, _| Control::Continue).is_err());
    }

    #[test]
    fn csv_layout() {
        let h = [EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25, lr: 1e-4 }];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_loss,lr\n1,0.5,0.25,0.0001\n");
    }
}
