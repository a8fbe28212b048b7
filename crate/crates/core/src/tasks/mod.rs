//! Inference procedures over a trained model: per-frame detection, sequence
//! classification, early prediction, anticipation and trajectory forecasting,
//! plus the evaluation metrics.

mod metrics;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use metrics::{accumulated_sq_error, accuracy, f1_macro};

use crate::array::Array;
use crate::autodiff::{ParamSet, Tape};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::model::{
    LabelChoice, Mode, Model, NextLabelBelief, RecurrentState, Route, StepContext, StepLabels,
};
use crate::rng::{fnv1a, KeyedNoise, NoiseRole, NoiseSource};

/// Frames whose beliefs are averaged by [`classify_sequence`] unless told otherwise.
pub const DEFAULT_TAIL_FRAMES: usize = 3;
/// Rollouts averaged by [`forecast`] unless told otherwise.
pub const DEFAULT_SAMPLES: usize = 20;
/// Observed fractions accepted by [`predict_partial`].
pub const PARTIAL_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Per-frame label beliefs of one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTimeline {
    pub predicted: Vec<usize>,
    pub beliefs: Vec<Vec<f64>>,
    /// Frames without a ground-truth label in the input.
    pub unobserved: Vec<bool>,
}

impl LabelTimeline {
    fn from_beliefs(beliefs: Vec<Vec<f64>>, unobserved: Vec<bool>) -> Self {
        LabelTimeline {
            predicted: beliefs.iter().map(|b| argmax(b)).collect(),
            beliefs,
            unobserved,
        }
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

/// Output of a recognition pass with all labels hidden.
#[derive(Debug, Clone)]
pub struct Recognition {
    /// `[entity][t]` recognition probabilities of the child label.
    pub child: Vec<Vec<Vec<f64>>>,
    /// `[entity][t]` recognition probabilities of the parent label; empty
    /// rows for flat groups.
    pub parent: Vec<Vec<Vec<f64>>>,
    /// `[entity][t]` prior belief about the label at `t + 1` given history
    /// up to `t`; empty unless requested.
    pub next: Vec<Vec<NextLabelBelief>>,
    pub state: RecurrentState,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the recognition networks over `seq` with every label hidden,
/// deterministically (no dropout, most probable labels, latent means).
pub fn recognize(model: &Model, params: &ParamSet, seq: &Sequence, with_anticipation: bool) -> Result<Recognition> {
    let spec = model.spec();
    let hidden = seq.unlabeled();
    hidden.check_spec(spec)?;
    let n = spec.n_entities();
    let mut rec = Recognition {
        child: vec![Vec::with_capacity(seq.len()); n],
        parent: vec![Vec::new(); n],
        next: vec![Vec::new(); n],
        state: model.initial_state(),
    };
    let mut noise = KeyedNoise::new(0, 0, 0);
    for t in 0..hidden.len() {
        let mut tape = Tape::new(params);
        let vars = rec.state.to_vars(&mut tape);
        let mut ctx = StepContext {
            noise: &mut noise,
            mode: Mode::Infer,
            route: Route::Posterior,
            t,
        };
        let out = model.step(&mut tape, &hidden.frames_at(t), &hidden.step_labels(t), &vars, &mut ctx)?;
        for (e, es) in out.entities.iter().enumerate() {
            rec.child[e].push(es.beliefs.label_posterior.prob_values(&tape));
            if let Some(q) = &es.beliefs.parent_posterior {
                rec.parent[e].push(q.prob_values(&tape));
            }
        }
        if with_anticipation {
            for (e, b) in model.next_label_beliefs(&mut tape, &out.state)?.into_iter().enumerate() {
                rec.next[e].push(b);
            }
        }
        rec.state = RecurrentState::from_vars(&tape, &out.state);
    }
    Ok(rec)
}

/// Online per-frame detection for the primary entity: the most probable
/// class of `q(y_t | x_t, h_{t-1})` at every frame.
pub fn detect(model: &Model, params: &ParamSet, stream: &Sequence) -> Result<LabelTimeline> {
    detect_entity(model, params, stream, 0)
}

pub fn detect_entity(model: &Model, params: &ParamSet, stream: &Sequence, entity: usize) -> Result<LabelTimeline> {
    if stream.is_empty() {
        return Err(Error::InvalidData(format!("recording `{}` is empty", stream.id)));
    }
    if entity >= model.spec().n_entities() {
        return Err(Error::invalid(format!("no entity {entity}")));
    }
    let rec = recognize(model, params, stream, false)?;
    let unobserved = (0..stream.len()).map(|t| stream.child_label(entity, t).is_none()).collect();
    Ok(LabelTimeline::from_beliefs(rec.child[entity].clone(), unobserved))
}

/// Class of the whole recording: recognition beliefs averaged over the last
/// `tail_frames` frames.
pub fn classify_sequence(
    model: &Model,
    params: &ParamSet,
    seq: &Sequence,
    tail_frames: usize,
) -> Result<(usize, Vec<f64>)> {
    if tail_frames == 0 || seq.len() < tail_frames {
        return Err(Error::InvalidData(format!(
            "recording `{}` has {} frames, need at least tail_frames = {tail_frames} >= 1",
            seq.id,
            seq.len()
        )));
    }
    let timeline = detect(model, params, seq)?;
    Ok(average_tail(&timeline.beliefs, tail_frames))
}

/// Mean of the last `tail` belief rows and its argmax.
pub fn average_tail(beliefs: &[Vec<f64>], tail: usize) -> (usize, Vec<f64>) {
    let rows = &beliefs[beliefs.len() - tail..];
    let mut mean = vec![0.0; rows[0].len()];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / tail as f64;
        }
    }
    (argmax(&mean), mean)
}

/// Ground-truth interval `start..end` of one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub segment: Segment,
    /// Class holding a strict majority of the interval's frames, if any.
    pub detected: Option<usize>,
    pub hit: bool,
}

/// Maximal runs of one observed label.
pub fn segments_from_labels(labels: &[Option<usize>]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let Some(l) = labels[t] else {
            t += 1;
            continue;
        };
        let start = t;
        while t < labels.len() && labels[t] == Some(l) {
            t += 1;
        }
        out.push(Segment { start, end: t, label: l });
    }
    out
}

/// An action counts as detected when more than half of the frames in its
/// interval are predicted as that action; ties are misses.
pub fn detect_segments(timeline: &LabelTimeline, truth: &[Segment]) -> Result<Vec<SegmentResult>> {
    let mut sorted: Vec<&Segment> = truth.iter().collect();
    sorted.sort_by_key(|s| s.start);
    for s in &sorted {
        if s.start >= s.end {
            return Err(Error::invalid(format!("empty interval {}..{}", s.start, s.end)));
        }
        if s.end > timeline.len() {
            return Err(Error::invalid(format!(
                "interval {}..{} exceeds the timeline of {} frames",
                s.start,
                s.end,
                timeline.len()
            )));
        }
    }
    if sorted.windows(2).any(|w| w[1].start < w[0].end) {
        return Err(Error::invalid("intervals overlap"));
    }
    Ok(truth
        .iter()
        .map(|&segment| {
            let frames = &timeline.predicted[segment.start..segment.end];
            let len = frames.len();
            let mut detected = None;
            for &candidate in frames {
                if 2 * frames.iter().filter(|&&p| p == candidate).count() > len {
                    detected = Some(candidate);
                    break;
                }
            }
            SegmentResult {
                segment,
                detected,
                hit: detected == Some(segment.label),
            }
        })
        .collect())
}

/// Early prediction: detection over the first `ceil(fraction * len)` frames
/// of a segment (preceded by the recording's earlier frames when
/// `with_history`), returning the final frame's class.
pub fn predict_partial(
    model: &Model,
    params: &ParamSet,
    seq: &Sequence,
    segment: (usize, usize),
    fraction: f64,
    with_history: bool,
) -> Result<usize> {
    if !PARTIAL_FRACTIONS.contains(&fraction) {
        return Err(Error::invalid(format!("fraction must be one of {PARTIAL_FRACTIONS:?}")));
    }
    let (start, end) = segment;
    if start >= end || end > seq.len() {
        return Err(Error::invalid(format!("segment {start}..{end} is empty or out of range")));
    }
    let n = observed_frames(end - start, fraction);
    let from = if with_history { 0 } else { start };
    let timeline = detect(model, params, &seq.window(from, start + n))?;
    Ok(*timeline.predicted.last().expect("non-empty prefix"))
}

/// `ceil(fraction * len)`.
pub fn observed_frames(len: usize, fraction: f64) -> usize {
    let n = crate::math::ceil(fraction * len as f64) as usize;
    n.clamp(1, len)
}

/// Most probable next label of every entity under the history prior.
pub fn anticipate(model: &Model, params: &ParamSet, state: &RecurrentState) -> Result<Vec<(usize, Vec<f64>)>> {
    state.check(model.spec())?;
    let mut tape = Tape::new(params);
    let vars = state.to_vars(&mut tape);
    Ok(model
        .next_label_beliefs(&mut tape, &vars)?
        .into_iter()
        .map(|b| (argmax(&b.child), b.child))
        .collect())
}

/// Rollout settings for [`forecast`] and [`anticipate_chain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    pub horizon: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Entities fed with ground truth instead of generated frames.
    pub clamp: Vec<usize>,
    /// Source of labels and latents for generated steps: the recognition
    /// networks applied to generated frames, or the history priors.
    pub route: Route,
    /// Draw each generated frame from the decoder; otherwise use its mean.
    pub sample_observations: bool,
    pub keep_samples: bool,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        ForecastOptions {
            horizon: 10,
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            clamp: Vec::new(),
            route: Route::Posterior,
            sample_observations: true,
            keep_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    /// `[frame][entity][dim]`.
    pub frames: Vec<Vec<Vec<f64>>>,
    /// `[frame][entity]` label realized at each generated frame.
    pub labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryForecast {
    pub horizon: usize,
    /// `[frame][entity][dim]`, the per-frame mean over rollouts.
    pub mean: Vec<Vec<Vec<f64>>>,
    pub samples: Option<Vec<TrajectorySample>>,
}

struct Rollout {
    sample: TrajectorySample,
    /// Primary-entity prior belief about each generated frame's label.
    anticipated: Vec<Vec<f64>>,
}

fn rollout(
    model: &Model,
    params: &ParamSet,
    prefix: &Sequence,
    truth: Option<&Sequence>,
    opts: &ForecastOptions,
    sample: usize,
    anticipation: bool,
) -> Result<Rollout> {
    let spec = model.spec();
    let n = spec.n_entities();
    let p = prefix.len();
    let mut noise = KeyedNoise::new(opts.seed, sample as u64, fnv1a(prefix.id.as_bytes()));
    let mut state = model.initial_state();
    let mut frames: Vec<Array> = Vec::new();
    let mut decoded: Vec<(Array, Array)> = Vec::new();
    let mut out = Rollout {
        sample: TrajectorySample {
            frames: Vec::with_capacity(opts.horizon),
            labels: Vec::with_capacity(opts.horizon),
        },
        anticipated: Vec::new(),
    };
    for t in 0..p + opts.horizon {
        let (labels, route) = if t < p {
            frames = prefix.frames_at(t);
            (prefix.step_labels(t), Route::Posterior)
        } else {
            let mut next = Vec::with_capacity(n);
            for e in 0..n {
                if opts.clamp.contains(&e) {
                    let truth = truth.expect("checked by caller");
                    next.push(truth.frame(e, t));
                    continue;
                }
                let (mu, log_sigma) = &decoded[e];
                let mut x: Vec<f64> = if opts.sample_observations {
                    let eps = noise.normals(t, e, NoiseRole::Observation, mu.cols());
                    mu.data()
                        .iter()
                        .zip(log_sigma.data())
                        .zip(eps.data())
                        .map(|((m, s), z)| m + crate::math::exp(*s) * z)
                        .collect()
                } else {
                    mu.data().to_vec()
                };
                if spec.residual_mode {
                    for (v, prev) in x.iter_mut().zip(frames[e].data()) {
                        *v += prev;
                    }
                }
                next.push(Array::row(&x));
            }
            out.sample.frames.push(next.iter().map(|a| a.data().to_vec()).collect());
            frames = next;
            (vec![StepLabels { y: LabelChoice::Unobserved, c: LabelChoice::Unobserved }; n], opts.route)
        };
        let mut tape = Tape::new(params);
        let vars = state.to_vars(&mut tape);
        if anticipation && t >= p {
            out.anticipated.push(model.next_label_beliefs(&mut tape, &vars)?.swap_remove(0).child);
        }
        let mut ctx = StepContext {
            noise: &mut noise,
            mode: Mode::Sample,
            route,
            t,
        };
        let step = model.step(&mut tape, &frames, &labels, &vars, &mut ctx)?;
        if t >= p {
            out.sample
                .labels
                .push(step.entities.iter().map(|es| tape.value(es.y).argmax()).collect());
        }
        decoded = step
            .entities
            .iter()
            .map(|es| {
                let d = &es.beliefs.decoded[0];
                (tape.value(d.mu).clone(), tape.value(d.log_sigma).clone())
            })
            .collect();
        state = RecurrentState::from_vars(&tape, &step.state);
    }
    Ok(out)
}

fn check_rollout(model: &Model, prefix: &Sequence, truth: Option<&Sequence>, opts: &ForecastOptions) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::InvalidData(format!("prefix `{}` is empty", prefix.id)));
    }
    if opts.horizon == 0 || opts.n_samples == 0 {
        return Err(Error::invalid("horizon and n_samples must be >= 1"));
    }
    prefix.check_spec(model.spec())?;
    if let Some(&e) = opts.clamp.iter().find(|&&e| e >= model.spec().n_entities()) {
        return Err(Error::invalid(format!("cannot clamp missing entity {e}")));
    }
    if !opts.clamp.is_empty() {
        let need = prefix.len() + opts.horizon;
        match truth {
            Some(t) if t.len() >= need && t.entities.len() == prefix.entities.len() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "clamping needs a ground-truth recording of at least {need} frames"
                )))
            }
        }
    }
    Ok(())
}

/// Conditions on `prefix`, then generates `horizon` frames per rollout by
/// feeding each generated frame back as the next input. Clamped entities
/// read their frames from `truth` (indexed from the start of the recording)
/// instead.
pub fn forecast(
    model: &Model,
    params: &ParamSet,
    prefix: &Sequence,
    truth: Option<&Sequence>,
    opts: &ForecastOptions,
) -> Result<TrajectoryForecast> {
    check_rollout(model, prefix, truth, opts)?;
    let mut samples = Vec::with_capacity(opts.n_samples);
    for s in 0..opts.n_samples {
        samples.push(rollout(model, params, prefix, truth, opts, s, false)?.sample);
    }
    let mut mean = samples[0].frames.clone();
    for frame in mean.iter_mut().flatten() {
        frame.iter_mut().for_each(|v| *v = 0.0);
    }
    let k = 1.0 / samples.len() as f64;
    for s in &samples {
        for (m, f) in mean.iter_mut().flatten().zip(s.frames.iter().flatten()) {
            for (a, b) in m.iter_mut().zip(f) {
                *a += b * k;
            }
        }
    }
    Ok(TrajectoryForecast {
        horizon: opts.horizon,
        mean,
        samples: opts.keep_samples.then_some(samples),
    })
}

/// Multi-step anticipation: generates future frames and labels with the
/// history priors and returns, for each future frame, the primary entity's
/// prior label belief averaged over rollouts.
pub fn anticipate_chain(
    model: &Model,
    params: &ParamSet,
    prefix: &Sequence,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let opts = ForecastOptions {
        horizon,
        n_samples,
        seed,
        clamp: Vec::new(),
        route: Route::Prior,
        sample_observations: true,
        keep_samples: false,
    };
    check_rollout(model, prefix, None, &opts)?;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for s in 0..n_samples {
        let r = rollout(model, params, prefix, None, &opts, s, true)?;
        if acc.is_empty() {
            acc = vec![vec![0.0; r.anticipated[0].len()]; horizon];
        }
        for (a, b) in acc.iter_mut().zip(&r.anticipated) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y / n_samples as f64;
            }
        }
    }
    Ok(acc)
}
