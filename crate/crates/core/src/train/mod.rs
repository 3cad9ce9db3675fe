//! SGD training loop, evaluation, metrics and checkpoints.

mod checkpoint;
mod eval;
mod metrics;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use eval::{evaluate, Evaluation, Predictor};
pub use metrics::{csv_header, metrics_csv, EpochMetrics};
pub use optim::{lr_at, OptimConfig, Sgd};

use crate::autodiff::Tape;
use crate::data::{iterate_batches, BatchPlan, LabeledImageSet};
use crate::error::{Error, Result};
use crate::head::fuse_score;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 64, seed: 0, optim: OptimConfig::desk(), eval_batch_size: 256 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// What one optimisation step saw.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<T> {
    pub loss_values: Vec<T>,
    pub selected: usize,
    pub routed_loss: T,
    /// Samples whose fused training-mode prediction was correct.
    pub correct: usize,
}

/// A model under training with its optimiser and history.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<T: Scalar> TrainRun<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.optim.clone());
        Ok(TrainRun { model, optimizer, config, epoch: 0, history: Vec::new() })
    }

    /// Rejects data whose layout disagrees with the model before any step.
    pub fn check_data(&self, set: &LabeledImageSet<T>) -> Result<()> {
        set.validate()?;
        let b = &self.model.config.backbone;
        let (h, w) = set.resolution();
        if set.channels() != b.in_channels || h != b.resolution || w != b.resolution {
            return Err(Error::Config(format!(
                "data is {}x{h}x{w} but the backbone expects {}x{}x{}",
                set.channels(),
                b.in_channels,
                b.resolution,
                b.resolution
            )));
        }
        if set.num_classes != self.model.config.head.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes but the head has {}",
                set.num_classes, self.model.config.head.num_classes
            )));
        }
        Ok(())
    }

    /// forward → head losses → routing → backward → SGD → λ update →
    /// running statistics. Gradients stay in the store until the next step.
    pub fn step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<StepRecord<T>> {
        let mut tape = Tape::new();
        let (out, stats) = self.model.forward_train(&mut tape, images, labels)?;
        let lambdas = self.model.lambdas();
        let probs: Vec<&Tensor<T>> = out.probs.iter().map(|&p| tape.value(p)).collect();
        let fused = fuse_score(&probs, &lambdas)?;
        let correct = fused.labels.iter().zip(labels).filter(|(p, y)| p == y).count();
        let grads = tape.backward(out.routed)?;
        self.model.store.load_grads(&tape, &grads);
        self.optimizer.step(&mut self.model.store)?;
        self.model.head.update_lambdas(&mut self.model.store, self.optimizer.lr);
        stats.apply(&mut self.model.store);
        Ok(StepRecord { loss_values: out.loss_values, selected: out.selected, routed_loss: out.routed_value, correct })
    }

    /// One pass over `train`; evaluates on `test` when given.
    pub fn run_epoch(&mut self, train: &LabeledImageSet<T>, test: Option<&LabeledImageSet<T>>) -> Result<&EpochMetrics> {
        let epoch = self.epoch;
        self.optimizer.set_epoch(epoch);
        let plan = BatchPlan::new(self.config.seed, self.config.batch_size)?;
        let mut routed = vec![0usize; self.model.head.num_heads()];
        let (mut loss_sum, mut steps, mut correct) = (0.0, 0usize, 0usize);
        for batch in iterate_batches(train, &plan, epoch as u64) {
            let rec = self.step(&batch.images, &batch.labels)?;
            routed[rec.selected] += 1;
            loss_sum += rec.routed_loss.f64();
            correct += rec.correct;
            steps += 1;
        }
        let test_acc = match test {
            Some(t) => Some(evaluate(&self.model, t, self.config.eval_batch_size)?.top1),
            None => None,
        };
        self.history.push(EpochMetrics {
            epoch,
            lr: self.optimizer.lr,
            train_loss: loss_sum / steps as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
            routed,
            lambdas: self.model.lambdas().iter().map(|l| l.f64()).collect(),
        });
        self.epoch += 1;
        Ok(self.history.last().expect("just pushed"))
    }
}

/// Trains for `config.epochs` epochs. `on_epoch` sees the run after each
/// epoch (for checkpoints or logging) and may abort it with an error.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &LabeledImageSet<T>,
    test_set: Option<&LabeledImageSet<T>>,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&TrainRun<T>) -> Result<()>,
) -> Result<TrainRun<T>> {
    let mut run = TrainRun::new(model, config)?;
    run.check_data(train_set)?;
    if let Some(t) = test_set {
        run.check_data(t)?;
    }
    while run.epoch < run.config.epochs {
        run.run_epoch(train_set, test_set)?;
        on_epoch(&run)?;
    }
    Ok(run)
}
