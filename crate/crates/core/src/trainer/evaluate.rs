use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::objectives::sequence_loss;
use crate::rng::{fnv1a, KeyedNoise};
use crate::tasks::{
    accumulated_sq_error, accuracy, classify_sequence, f1_macro, forecast, recognize, ForecastOptions,
    DEFAULT_SAMPLES, DEFAULT_TAIL_FRAMES,
};

pub const DEFAULT_REPEATS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Per-frame recognition of the primary entity's child label.
    Detect,
    /// Prediction of the next frame's label from the history prior.
    Anticipate,
    /// One label per recording from the tail-averaged recognition beliefs.
    Classify,
    /// Rollout of the final `horizon` frames from the preceding prefix.
    Forecast,
    /// Mean per-recording training loss under sampled noise.
    Bound,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Detect, Task::Anticipate, Task::Classify, Task::Forecast, Task::Bound];

    pub fn name(self) -> &'static str {
        match self {
            Task::Detect => "detect",
            Task::Anticipate => "anticipate",
            Task::Classify => "classify",
            Task::Forecast => "forecast",
            Task::Bound => "bound",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub repeats: usize,
    pub seed: u64,
    pub horizon: usize,
    pub tail_frames: usize,
    pub forecast_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            repeats: DEFAULT_REPEATS,
            seed: 0,
            horizon: 10,
            tail_frames: DEFAULT_TAIL_FRAMES,
            forecast_samples: DEFAULT_SAMPLES,
        }
    }
}

/// One metric with its value from every repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub task: Task,
    pub name: String,
    pub values: Vec<f64>,
}

impl Metric {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        let n = self.values.len() as f64;
        libm::sqrt(self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metrics: Vec<Metric>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty()
    }

    pub fn get(&self, task: Task, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.task == task && m.name == name)
    }

    pub fn mean(&self, task: Task, name: &str) -> Option<f64> {
        self.get(task, name).map(Metric::mean)
    }
}

/// Runs each task `repeats` times and collects the per-repeat metrics.
/// Truth labels are the labels stored in `dataset`; frames without a label
/// are skipped. Repeat `r` of a stochastic task uses seed `seed + r`.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    dataset: &[Sequence],
    tasks: &[Task],
    opts: &EvalOptions,
) -> Result<Report> {
    if tasks.is_empty() {
        return Ok(Report::default());
    }
    if opts.repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidData("evaluation set is empty".into()));
    }
    for seq in dataset {
        seq.check_spec(model.spec())?;
    }
    let mut report = Report::default();
    for &task in tasks {
        let mut rows: Vec<Vec<(&'static str, f64)>> = Vec::with_capacity(opts.repeats);
        for r in 0..opts.repeats {
            let seed = opts.seed.wrapping_add(r as u64);
            rows.push(run_task(model, params, dataset, task, opts, seed)?);
        }
        for (k, &(name, _)) in rows[0].iter().enumerate() {
            report.metrics.push(Metric {
                task,
                name: name.into(),
                values: rows.iter().map(|row| row[k].1).collect(),
            });
        }
    }
    Ok(report)
}

fn run_task(
    model: &Model,
    params: &ParamSet,
    dataset: &[Sequence],
    task: Task,
    opts: &EvalOptions,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    let n_class = model.spec().groups[model.spec().entities[0]].dim_y;
    match task {
        Task::Detect | Task::Anticipate => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for seq in dataset {
                let rec = recognize(model, params, seq, task == Task::Anticipate)?;
                if task == Task::Detect {
                    for (t, b) in rec.child[0].iter().enumerate() {
                        pred.push(crate::tasks::argmax(b));
                        truth.push(seq.child_label(0, t));
                    }
                } else {
                    for t in 0..seq.len().saturating_sub(1) {
                        pred.push(crate::tasks::argmax(&rec.next[0][t].child));
                        truth.push(seq.child_label(0, t + 1));
                    }
                }
            }
            Ok(vec![
                ("accuracy", accuracy(&pred, &truth)?),
                ("f1_macro", f1_macro(&pred, &truth, n_class)?),
            ])
        }
        Task::Classify => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for seq in dataset {
                pred.push(classify_sequence(model, params, seq, opts.tail_frames)?.0);
                truth.push(seq.labels.iter().rev().find_map(|l| *l));
            }
            Ok(vec![("accuracy", accuracy(&pred, &truth)?)])
        }
        Task::Forecast => {
            let fo = ForecastOptions {
                horizon: opts.horizon,
                n_samples: opts.forecast_samples,
                seed,
                ..ForecastOptions::default()
            };
            let (mut err, mut frozen, mut n) = (0.0, 0.0, 0usize);
            for seq in dataset.iter().filter(|s| s.len() > opts.horizon) {
                let cut = seq.len() - opts.horizon;
                let f = forecast(model, params, &seq.prefix(cut), None, &fo)?;
                let truth: Vec<Vec<Vec<f64>>> = (cut..seq.len()).map(|t| frames_of(seq, t)).collect();
                let still = vec![frames_of(seq, cut - 1); opts.horizon];
                err += accumulated_sq_error(&f.mean, &truth, opts.horizon)?;
                frozen += accumulated_sq_error(&still, &truth, opts.horizon)?;
                n += 1;
            }
            if n == 0 {
                return Err(Error::InvalidData("no recording is longer than the forecast horizon".into()));
            }
            Ok(vec![
                ("accumulated_sq_error", err / n as f64),
                ("frozen_pose_error", frozen / n as f64),
            ])
        }
        Task::Bound => {
            let mut total = 0.0;
            for seq in dataset {
                let mut tape = Tape::new(params);
                let mut noise = KeyedNoise::new(seed, 0, fnv1a(seq.id.as_bytes()));
                let (v, _) = sequence_loss(model, &mut tape, seq, &mut noise, Mode::Sample)?;
                total += tape.scalar(v);
            }
            Ok(vec![("loss", total / dataset.len() as f64)])
        }
    }
}

fn frames_of(seq: &Sequence, t: usize) -> Vec<Vec<f64>> {
    seq.entities.iter().map(|e| e.frames[t].clone()).collect()
}
