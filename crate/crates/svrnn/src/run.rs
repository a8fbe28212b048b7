//! Training runs with wall-clock logging, periodic evaluation and
//! checkpoints on disk.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use svrnn_core::data::Sequence;
use svrnn_core::trainer::{evaluate, EvalOptions, Report, StepRecord, Task, TrainConfig, Trainer};
use svrnn_core::{Model, ModelSpec};

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::format::write_text;
use crate::report::report_csv;

pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "evals.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub record: StepRecord,
    /// Seconds since the start of this process's part of the run.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSnapshot {
    pub step: u64,
    pub report: Report,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub evals: Vec<EvalSnapshot>,
}

impl TrainLog {
    pub fn records(&self) -> Vec<StepRecord> {
        self.rows.iter().map(|r| r.record).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,recon,kl_z,kl_y,kl_c,sup_y,sup_c,label_const,grad_max_abs,wall_seconds\n");
        for row in &self.rows {
            let r = &row.record;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
                r.step,
                r.epoch,
                r.loss,
                r.recon,
                r.kl_z,
                r.kl_y,
                r.kl_c,
                r.sup_y,
                r.sup_c,
                r.label_const,
                r.grad_max_abs,
                row.wall_seconds
            )
            .unwrap();
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,");
        s.push_str(report_csv(&Report::default()).trim_end());
        s.push('\n');
        for e in &self.evals {
            for line in report_csv(&e.report).lines().skip(1) {
                writeln!(s, "{},{line}", e.step).unwrap();
            }
        }
        s
    }
}

/// Optional extras of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Receives checkpoints and logs.
    pub out_dir: Option<&'a Path>,
    pub eval_set: Option<&'a [Sequence]>,
    pub eval_tasks: Vec<Task>,
    pub eval_options: EvalOptions,
    /// Stop once this many updates have been applied in total.
    pub stop_at: Option<u64>,
}

/// Trains a freshly initialized model; initialization uses the config seed.
pub fn train(spec: &ModelSpec, config: &TrainConfig, dataset: &[Sequence], opts: &RunOptions) -> Result<(Checkpoint, TrainLog)> {
    let (model, params) = Model::init(spec, config.seed)?;
    let trainer = Trainer::new(&model, params, config.clone(), dataset)?;
    drive(trainer, opts)
}

/// Continues the run stored in `checkpoint`.
pub fn resume(checkpoint: &Checkpoint, dataset: &[Sequence], opts: &RunOptions) -> Result<(Checkpoint, TrainLog)> {
    let config = checkpoint.train_config.clone().ok_or_else(|| {
        crate::error::Error::Usage("checkpoint carries no training configuration to resume".into())
    })?;
    let model = checkpoint.model()?;
    let trainer = Trainer::resume(&model, checkpoint.params.clone(), checkpoint.optimizer.clone(), config, dataset)?;
    drive(trainer, opts)
}

fn snapshot(trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        spec: trainer.model().spec().clone(),
        params: trainer.params().clone(),
        optimizer: trainer.optimizer().clone(),
        train_config: Some(trainer.config().clone()),
    }
}

fn drive(mut trainer: Trainer, opts: &RunOptions) -> Result<(Checkpoint, TrainLog)> {
    let start = Instant::now();
    let mut log = TrainLog::default();
    let stop = opts.stop_at.unwrap_or(u64::MAX).min(trainer.total_steps());
    let outcome = (|| -> Result<()> {
        while trainer.step_index() < stop {
            let record = trainer.step()?;
            log.rows.push(LogRow {
                record,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            if trainer.at_eval_point() {
                if let Some(dir) = opts.out_dir {
                    snapshot(&trainer).save(dir.join(format!("checkpoint-{:06}.ckpt", trainer.step_index())))?;
                }
                if let Some(set) = opts.eval_set {
                    let report = evaluate(trainer.model(), trainer.params(), set, &opts.eval_tasks, &opts.eval_options)?;
                    log.evals.push(EvalSnapshot {
                        step: trainer.step_index(),
                        report,
                    });
                }
            }
        }
        Ok(())
    })();
    let ck = snapshot(&trainer);
    if let Some(dir) = opts.out_dir {
        write_text(dir.join(LOG_FILE), &log.to_csv())?;
        if !log.evals.is_empty() {
            write_text(dir.join(EVAL_FILE), &log.evals_csv())?;
        }
        if outcome.is_ok() {
            ck.save(dir.join(FINAL_CHECKPOINT))?;
        }
    }
    outcome.map(|()| (ck, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use svrnn_core::data::{synth_generate, SynthSpec};
    use svrnn_core::trainer::EvalOptions;

    fn small() -> (ModelSpec, Vec<Sequence>) {
        let mut synth = SynthSpec::switching(2, 3, 1.0, 0.3, 0.9);
        synth.min_len = 6;
        synth.max_len = 6;
        let (data, _) = synth_generate(&synth, 4, 0).unwrap();
        (ModelSpec::flat(3, 2).with_width(6, 2, 1), data)
    }

    #[test]
    fn logs_checkpoints_and_evaluations() {
        let (spec, data) = small();
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 2,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let opts = RunOptions {
            out_dir: Some(dir.path()),
            eval_set: Some(&data),
            eval_tasks: vec![Task::Detect],
            eval_options: EvalOptions {
                repeats: 1,
                ..EvalOptions::default()
            },
            stop_at: None,
        };
        let (ck, log) = train(&spec, &config, &data, &opts).unwrap();
        assert_eq!(ck.step(), 6);
        assert!(log.rows.windows(2).all(|w| w[0].record.step < w[1].record.step));
        assert_eq!(log.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4, 6]);
        for f in ["checkpoint-000002.ckpt", "checkpoint-000006.ckpt", FINAL_CHECKPOINT, LOG_FILE, EVAL_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("step,epoch,loss,"));
        let evals = std::fs::read_to_string(dir.path().join(EVAL_FILE)).unwrap();
        assert!(evals.starts_with("step,task,metric,mean,std,repeats,values\n2,detect,accuracy,"));
        let mid = Checkpoint::load(dir.path().join("checkpoint-000002.ckpt")).unwrap();
        assert_eq!(mid.step(), 2);
    }

    #[test]
    fn divergence_keeps_the_partial_log_and_skips_the_final_checkpoint() {
        let (spec, mut data) = small();
        data[1].entities[0].frames[2][0] = 1e300;
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig::default();
        let opts = RunOptions {
            out_dir: Some(dir.path()),
            ..RunOptions::default()
        };
        let err = train(&spec, &config, &data, &opts).unwrap_err();
        assert_eq!(err.kind(), "diverged", "{err}");
        assert!(dir.path().join(LOG_FILE).exists());
        assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
    }

    #[test]
    fn resume_needs_a_training_configuration() {
        let (spec, data) = small();
        let (_, params) = Model::init(&spec, 0).unwrap();
        let ck = Checkpoint {
            spec,
            optimizer: svrnn_core::optim::Optimizer::new(Default::default(), 1e-3, &params).unwrap(),
            params,
            train_config: None,
        };
        assert_eq!(resume(&ck, &data, &RunOptions::default()).unwrap_err().kind(), "usage");
    }
}
