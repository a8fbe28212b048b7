//! Minibatch training and evaluation.
//!
//! [`Trainer`] owns the parameters and optimizer state and advances one
//! minibatch per [`Trainer::step`]. Everything it does is a pure function of
//! the configuration seed and the global step index: the epoch order comes
//! from `(seed, epoch)` and the noise of each sequence from
//! `(seed, step, dataset index)`. Resuming from saved parameters and
//! optimizer moments therefore continues the exact same trajectory.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_gradients, ParamSet};
use crate::data::{mask_labels, MaskLevel, MaskMode, Sequence};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::objectives::{batch_loss_and_gradient, StepLoss};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_rng, KeyedNoise};

mod evaluate;

pub use evaluate::{evaluate, EvalOptions, Metric, Report, Task};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const MOTION_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_CLIP_THRESHOLD: f64 = 5.0;
pub const DEFAULT_BATCH_SIZE: usize = 8;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const TRAIN_STREAM: u64 = 0x5452_4149;

/// Label hiding applied to the training set before the first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub fraction: f64,
    pub mode: MaskMode,
    pub level: MaskLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Element-wise gradient clamp.
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Steps between evaluation/checkpoint points; 0 disables them.
    pub eval_every: u64,
    pub mask: Option<MaskPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::default(),
            eval_every: 0,
            mask: None,
        }
    }
}

impl TrainConfig {
    /// Settings used for motion synthesis.
    pub fn motion_synthesis() -> Self {
        TrainConfig {
            learning_rate: MOTION_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<&str> = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive");
        }
        if !(self.clip_threshold > 0.0) {
            problems.push("clip_threshold must be positive");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1");
        }
        if let Some(m) = &self.mask {
            if !(0.0..=1.0).contains(&m.fraction) {
                problems.push("mask fraction must lie in [0, 1]");
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// Batch-averaged loss decomposition of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update this row describes.
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub kl_c: f64,
    pub sup_y: f64,
    pub sup_c: f64,
    pub label_const: f64,
    /// Largest gradient magnitude before clipping.
    pub grad_max_abs: f64,
}

impl StepRecord {
    fn from_traces(step: u64, epoch: usize, loss: f64, traces: &[Vec<StepLoss>], grad_max_abs: f64) -> Self {
        let mut r = StepRecord {
            step,
            epoch,
            loss,
            recon: 0.0,
            kl_z: 0.0,
            kl_y: 0.0,
            kl_c: 0.0,
            sup_y: 0.0,
            sup_c: 0.0,
            label_const: 0.0,
            grad_max_abs,
        };
        let k = 1.0 / traces.len() as f64;
        for s in traces.iter().flatten() {
            r.recon += k * s.recon;
            r.kl_z += k * s.kl_z;
            r.kl_y += k * s.kl_y;
            r.kl_c += k * s.kl_c;
            r.sup_y += k * s.sup_y;
            r.sup_c += k * s.sup_c;
            r.label_const += k * s.label_const;
        }
        r
    }
}

/// Dataset indices of one epoch in visiting order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(&[SHUFFLE_STREAM, seed, epoch as u64]));
    order
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    data: Vec<Sequence>,
    params: ParamSet,
    optimizer: Optimizer,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Starts training from `params` with a fresh optimizer.
    pub fn new(model: &Model, params: ParamSet, config: TrainConfig, dataset: &[Sequence]) -> Result<Self> {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params)?;
        Self::resume(model, params, optimizer, config, dataset)
    }

    /// Continues a run; the optimizer's step count says where.
    pub fn resume(
        model: &Model,
        params: ParamSet,
        optimizer: Optimizer,
        config: TrainConfig,
        dataset: &[Sequence],
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidData("training set is empty".into()));
        }
        if optimizer.kind != config.optimizer || optimizer.learning_rate != config.learning_rate {
            return Err(Error::invalid("optimizer state does not match the training configuration"));
        }
        let model = Model::bind(model.spec(), &params)?;
        for seq in dataset {
            seq.validate()?;
            seq.check_spec(model.spec())?;
        }
        let data = match &config.mask {
            Some(m) => mask_labels(dataset, m.fraction, config.seed, m.mode, m.level)?,
            None => dataset.to_vec(),
        };
        let trainer = Trainer {
            model,
            config,
            data,
            params,
            optimizer,
            order: None,
        };
        if trainer.step_index() > trainer.total_steps() {
            return Err(Error::invalid(format!(
                "optimizer is at step {} but the run has only {} steps",
                trainer.step_index(),
                trainer.total_steps()
            )));
        }
        Ok(trainer)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.batches_per_epoch() * self.config.epochs) as u64
    }

    /// Number of updates applied so far.
    pub fn step_index(&self) -> u64 {
        self.optimizer.steps()
    }

    pub fn is_done(&self) -> bool {
        self.step_index() >= self.total_steps()
    }

    /// Whether the update just applied is an evaluation point.
    pub fn at_eval_point(&self) -> bool {
        let e = self.config.eval_every;
        e > 0 && self.step_index() > 0 && self.step_index().is_multiple_of(e)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// The training set after masking.
    pub fn dataset(&self) -> &[Sequence] {
        &self.data
    }

    pub fn into_parts(self) -> (ParamSet, Optimizer) {
        (self.params, self.optimizer)
    }

    /// Dataset indices of the next minibatch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let s = self.step_index() as usize;
        let (epoch, slot) = (s / bpe, s % bpe);
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.config.seed, epoch, self.data.len())));
        }
        let order = &self.order.as_ref().unwrap().1;
        let b = self.config.batch_size;
        order[slot * b..((slot + 1) * b).min(order.len())].to_vec()
    }

    /// Applies one clipped update. A non-finite loss aborts with the row
    /// of the offending step and leaves the parameters untouched.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let step = self.step_index();
        let epoch = step as usize / self.batches_per_epoch();
        let idx = self.next_batch();
        let batch: Vec<&Sequence> = idx.iter().map(|&i| &self.data[i]).collect();
        let seed = self.config.seed;
        let result = batch_loss_and_gradient(
            &self.model,
            &self.params,
            &batch,
            |i| KeyedNoise::new(seed ^ TRAIN_STREAM, step, idx[i] as u64),
            Mode::Train,
        );
        let (loss, grads, traces) = match result {
            Ok(v) => v,
            Err(e) if e.is_non_finite() => {
                return Err(Error::Diverged {
                    step: step + 1,
                    detail: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        };
        let record = StepRecord::from_traces(step + 1, epoch, loss, &traces, grads.max_abs());
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                detail: format!("{record:?}"),
            });
        }
        let grads = clip_gradients(grads, self.config.clip_threshold)?;
        self.optimizer.update(&mut self.params, &grads)?;
        Ok(record)
    }

    /// Runs to the end, returning every step row.
    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        let mut rows = Vec::with_capacity((self.total_steps() - self.step_index()) as usize);
        while !self.is_done() {
            rows.push(self.step()?);
        }
        Ok(rows)
    }
}

/// Short human-readable tag of a record, used in error messages and logs.
pub fn describe(record: &StepRecord) -> String {
    format!(
        "step {} (epoch {}): loss {:.6} recon {:.6} kl_z {:.6} kl_y {:.6} kl_c {:.6} sup_y {:.6} sup_c {:.6}",
        record.step,
        record.epoch,
        record.loss,
        record.recon,
        record.kl_z,
        record.kl_y,
        record.kl_c,
        record.sup_y,
        record.sup_c
    )
}
