//! Per-step variational bounds for every label-observation case, their sum
//! over time and entities, and an exact-enumeration oracle for unobserved
//! labels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::{GradientSet, ParamSet, Tape, Var};
use crate::data::Sequence;
use crate::distributions::{
    categorical_kl, gaussian_kl, gaussian_log_pdf, label_cross_entropy, uniform_label_cost, CategoricalParams,
};
use crate::error::{Error, Result};
use crate::model::{LabelChoice, Mode, Model, ModelSpec, RecurrentState, Route, StepBeliefs, StepContext, StepLabels};
use crate::rng::NoiseSource;

/// Largest class count [`unlabeled_loss_exact`] enumerates.
pub const MAX_ENUMERATED_CLASSES: usize = 16;
/// Largest number of step evaluations [`unlabeled_loss_exact`] performs.
pub const MAX_ENUMERATED_STEPS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationCase {
    pub y_observed: bool,
    pub c_observed: bool,
}

impl ObservationCase {
    pub fn of(labels: StepLabels, hierarchical: bool) -> Result<Self> {
        let c_observed = labels.c.is_observed();
        if c_observed && !hierarchical {
            return Err(Error::invalid("a parent label was observed for a flat model"));
        }
        Ok(ObservationCase {
            y_observed: labels.y.is_observed(),
            c_observed,
        })
    }

    /// `Ly`/`Uy` followed by `Lc`/`Uc` (the latter only when hierarchical).
    pub fn tag(self, hierarchical: bool) -> &'static str {
        match (self.y_observed, hierarchical, self.c_observed) {
            (true, false, _) => "Ly",
            (false, false, _) => "Uy",
            (true, true, true) => "LyLc",
            (true, true, false) => "LyUc",
            (false, true, true) => "UyLc",
            (false, true, false) => "UyUc",
        }
    }
}

/// Loss terms of one entity at one step. Terms that do not apply to the
/// step's case are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub t: usize,
    pub entity: usize,
    pub case: ObservationCase,
    /// Negative log-likelihood of the decoder target (zero on the last step).
    pub recon: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub kl_c: f64,
    pub sup_y: f64,
    pub sup_c: f64,
    /// `log N` for every observed label (uniform label prior).
    pub label_const: f64,
}

impl StepLoss {
    /// The negated per-step bound, without the classifier terms.
    pub fn bound(&self) -> f64 {
        self.recon + self.kl_z + self.kl_y + self.kl_c + self.label_const
    }

    pub fn total(&self, alpha: f64) -> f64 {
        self.bound() + alpha * (self.sup_y + self.sup_c)
    }
}

/// [`StepLoss`] terms still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct StepLossVars {
    pub case: ObservationCase,
    pub recon: Option<Var>,
    pub kl_z: Var,
    pub kl_y: Option<Var>,
    pub kl_c: Option<Var>,
    pub sup_y: Option<Var>,
    pub sup_c: Option<Var>,
    pub label_const: f64,
}

impl StepLossVars {
    fn bound_parts(&self) -> impl Iterator<Item = Var> {
        self.recon.into_iter().chain([self.kl_z]).chain(self.kl_y).chain(self.kl_c)
    }

    /// `bound + alpha * sup` as one scalar node.
    pub fn combine(&self, tape: &mut Tape<'_>, alpha: f64) -> Result<Var> {
        let parts: Vec<Var> = self.bound_parts().collect();
        let mut acc = tape.add_all(&parts)?;
        if self.label_const != 0.0 {
            acc = tape.offset(acc, self.label_const)?;
        }
        let sup: Vec<Var> = self.sup_y.into_iter().chain(self.sup_c).collect();
        if !sup.is_empty() {
            let s = tape.add_all(&sup)?;
            let s = tape.scale(s, alpha)?;
            acc = tape.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn values(&self, tape: &Tape<'_>, t: usize, entity: usize) -> StepLoss {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        StepLoss {
            t,
            entity,
            case: self.case,
            recon: v(self.recon),
            kl_z: tape.scalar(self.kl_z),
            kl_y: v(self.kl_y),
            kl_c: v(self.kl_c),
            sup_y: v(self.sup_y),
            sup_c: v(self.sup_c),
            label_const: self.label_const,
        }
    }
}

fn supervised(tape: &mut Tape<'_>, k: usize, q: &CategoricalParams, p: &CategoricalParams) -> Result<Var> {
    let target = Array::one_hot(q.n_class(tape), k);
    let a = label_cross_entropy(tape, &target, q)?;
    let b = label_cross_entropy(tape, &target, p)?;
    tape.add(a, b)
}

/// Loss terms of one entity's step.
///
/// Observed labels contribute cross-entropy against both the recognition
/// network and the prior plus the uniform label cost; unobserved (or forced)
/// labels contribute the categorical KL between them. `target` is the decoder
/// target, absent on the last step.
pub fn step_loss(
    tape: &mut Tape<'_>,
    beliefs: &StepBeliefs,
    labels: StepLabels,
    target: Option<&Array>,
) -> Result<StepLossVars> {
    let hierarchical = beliefs.parent_prior.is_some();
    let case = ObservationCase::of(labels, hierarchical)?;
    let recon = match target {
        None => None,
        Some(x) => {
            let xv = tape.input(x.clone());
            let mut terms = Vec::with_capacity(beliefs.decoded.len());
            for d in &beliefs.decoded {
                terms.push(gaussian_log_pdf(tape, xv, d)?);
            }
            let s = tape.add_all(&terms)?;
            Some(tape.scale(s, -1.0 / terms.len() as f64)?)
        }
    };
    let kl_z = gaussian_kl(tape, &beliefs.latent_posterior, &beliefs.latent_prior)?;
    let mut label_const = 0.0;
    let (kl_y, sup_y) = match labels.y {
        LabelChoice::Observed(k) => {
            label_const += uniform_label_cost(beliefs.label_posterior.n_class(tape));
            (None, Some(supervised(tape, k, &beliefs.label_posterior, &beliefs.label_prior)?))
        }
        _ => (Some(categorical_kl(tape, &beliefs.label_posterior, &beliefs.label_prior)?), None),
    };
    let (kl_c, sup_c) = match (&beliefs.parent_posterior, &beliefs.parent_prior) {
        (Some(q), Some(p)) => match labels.c {
            LabelChoice::Observed(k) => {
                label_const += uniform_label_cost(q.n_class(tape));
                (None, Some(supervised(tape, k, q, p)?))
            }
            _ => (Some(categorical_kl(tape, q, p)?), None),
        },
        _ => (None, None),
    };
    Ok(StepLossVars {
        case,
        recon,
        kl_z,
        kl_y,
        kl_c,
        sup_y,
        sup_c,
        label_const,
    })
}

/// Decoder target for `entity` at step `t`: the next frame, or its increment
/// in residual mode. `None` on the last step.
pub fn decoder_target(spec: &ModelSpec, seq: &Sequence, entity: usize, t: usize) -> Option<Array> {
    if t + 1 >= seq.len() {
        return None;
    }
    let next = &seq.entities[entity].frames[t + 1];
    if spec.residual_mode {
        let cur = &seq.entities[entity].frames[t];
        Some(Array::row(&next.iter().zip(cur).map(|(a, b)| a - b).collect::<Vec<_>>()))
    } else {
        Some(Array::row(next))
    }
}

/// The loss of one recording: per-step terms summed over entities and time.
/// Returns the scalar node and the per-step trace.
pub fn sequence_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    seq: &Sequence,
    noise: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<(Var, Vec<StepLoss>)> {
    let spec = model.spec();
    seq.check_spec(spec)?;
    let mut state = model.initial_state().to_vars(tape);
    let mut total: Option<Var> = None;
    let mut trace = Vec::with_capacity(seq.len() * spec.n_entities());
    for t in 0..seq.len() {
        let labels = seq.step_labels(t);
        let mut ctx = StepContext {
            noise: &mut *noise,
            mode,
            route: Route::Posterior,
            t,
        };
        let out = model.step(tape, &seq.frames_at(t), &labels, &state, &mut ctx)?;
        let step = entity_totals(tape, spec, seq, t, &out.entities, &labels, Some(&mut trace))?;
        total = Some(match total {
            None => step,
            Some(acc) => tape.add(acc, step)?,
        });
        state = out.state;
    }
    let total = match total {
        Some(v) => v,
        None => tape.input(Array::scalar(0.0)),
    };
    Ok((total, trace))
}

fn entity_totals(
    tape: &mut Tape<'_>,
    spec: &ModelSpec,
    seq: &Sequence,
    t: usize,
    entities: &[crate::model::EntityStep],
    labels: &[StepLabels],
    mut trace: Option<&mut Vec<StepLoss>>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(entities.len());
    for (e, es) in entities.iter().enumerate() {
        let target = decoder_target(spec, seq, e, t);
        let vars = step_loss(tape, &es.beliefs, labels[e], target.as_ref()).map_err(|err| err.at_step(t, e))?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(vars.values(tape, t, e));
        }
        parts.push(vars.combine(tape, spec.alpha)?);
    }
    tape.add_all(&parts)
}

/// Loss value, parameter gradient and trace of one recording.
pub fn sequence_loss_and_gradient(
    model: &Model,
    params: &ParamSet,
    seq: &Sequence,
    noise: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<(f64, GradientSet, Vec<StepLoss>)> {
    let mut tape = Tape::new(params);
    let (loss, trace) = sequence_loss(model, &mut tape, seq, noise, mode)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads, trace))
}

/// Gradient of the loss averaged over a batch. `noise_for(i)` supplies the
/// noise of `batch[i]`.
pub fn batch_loss_and_gradient<N, F>(
    model: &Model,
    params: &ParamSet,
    batch: &[&Sequence],
    mut noise_for: F,
    mode: Mode,
) -> Result<(f64, GradientSet, Vec<Vec<StepLoss>>)>
where
    N: NoiseSource,
    F: FnMut(usize) -> N,
{
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = params.zero_gradients();
    let mut loss = 0.0;
    let mut traces = Vec::with_capacity(batch.len());
    for (i, seq) in batch.iter().enumerate() {
        let mut noise = noise_for(i);
        let (l, g, tr) = sequence_loss_and_gradient(model, params, seq, &mut noise, mode)?;
        loss += l;
        grads.accumulate(&g)?;
        traces.push(tr);
    }
    let k = 1.0 / batch.len() as f64;
    grads.scale(k);
    Ok((loss * k, grads, traces))
}

/// Slot of an unobserved label being enumerated.
#[derive(Debug, Clone, Copy)]
struct Slot {
    entity: usize,
    parent: bool,
    n: usize,
}

/// The loss with the expectation over every unobserved label computed by
/// exact enumeration of one-hot values weighted by the recognition
/// probabilities, in place of relaxed samples. Latent noise is taken from
/// `noise` exactly as [`sequence_loss`] does; label noise is never drawn.
pub fn unlabeled_loss_exact(
    model: &Model,
    params: &ParamSet,
    seq: &Sequence,
    noise: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<f64> {
    let spec = model.spec();
    seq.check_spec(spec)?;
    for g in &spec.groups {
        let widest = g.dim_y.max(g.dim_c.unwrap_or(0));
        if widest > MAX_ENUMERATED_CLASSES {
            return Err(Error::invalid(format!(
                "exact enumeration supports at most {MAX_ENUMERATED_CLASSES} classes, group `{}` has {widest}",
                g.name
            )));
        }
    }
    let slots: Vec<Vec<Slot>> = (0..seq.len()).map(|t| unobserved_slots(spec, seq, t)).collect();
    let mut evaluations = 0usize;
    let mut branch = 1usize;
    for s in &slots {
        branch = branch.saturating_mul(s.iter().map(|x| x.n).product::<usize>());
        evaluations = evaluations.saturating_add(branch);
    }
    if evaluations > MAX_ENUMERATED_STEPS {
        return Err(Error::invalid(format!(
            "exact enumeration needs {evaluations} step evaluations, limit is {MAX_ENUMERATED_STEPS}"
        )));
    }
    if seq.is_empty() {
        return Ok(0.0);
    }
    explore(model, params, seq, &slots, noise, mode, 0, &model.initial_state(), None)
}

fn unobserved_slots(spec: &ModelSpec, seq: &Sequence, t: usize) -> Vec<Slot> {
    let mut out = Vec::new();
    for e in 0..spec.n_entities() {
        let g = spec.group_of(e);
        if let Some(dc) = g.dim_c {
            if seq.parent_label(e, t).is_none() {
                out.push(Slot { entity: e, parent: true, n: dc });
            }
        }
        if seq.child_label(e, t).is_none() {
            out.push(Slot { entity: e, parent: false, n: g.dim_y });
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn explore(
    model: &Model,
    params: &ParamSet,
    seq: &Sequence,
    slots: &[Vec<Slot>],
    noise: &mut dyn NoiseSource,
    mode: Mode,
    t: usize,
    state: &RecurrentState,
    acc: Option<f64>,
) -> Result<f64> {
    if t == seq.len() {
        return Ok(acc.unwrap_or(0.0));
    }
    let spec = model.spec();
    let here = &slots[t];
    let combos: usize = here.iter().map(|s| s.n).product();
    let mut expected = 0.0;
    let mut assignment = vec![0usize; here.len()];
    for _ in 0..combos {
        let mut labels = seq.step_labels(t);
        for (slot, &k) in here.iter().zip(&assignment) {
            let l = &mut labels[slot.entity];
            if slot.parent {
                l.c = LabelChoice::Forced(k);
            } else {
                l.y = LabelChoice::Forced(k);
            }
        }
        let mut tape = Tape::new(params);
        let vars = state.to_vars(&mut tape);
        let mut ctx = StepContext {
            noise: &mut *noise,
            mode,
            route: Route::Posterior,
            t,
        };
        let out = model.step(&mut tape, &seq.frames_at(t), &labels, &vars, &mut ctx)?;
        let mut weight = 1.0;
        for (slot, &k) in here.iter().zip(&assignment) {
            let b = &out.entities[slot.entity].beliefs;
            let q = if slot.parent {
                b.parent_posterior.as_ref().expect("hierarchical slot")
            } else {
                &b.label_posterior
            };
            weight *= q.prob_values(&tape)[k];
        }
        let step = entity_totals(&mut tape, spec, seq, t, &out.entities, &labels, None)?;
        let step = tape.scalar(step);
        let next_acc = match acc {
            None => step,
            Some(a) => a + step,
        };
        let next_state = RecurrentState::from_vars(&tape, &out.state);
        let rest = explore(model, params, seq, slots, noise, mode, t + 1, &next_state, Some(next_acc))?;
        expected += weight * rest;
        for (digit, slot) in assignment.iter_mut().zip(here) {
            *digit += 1;
            if *digit < slot.n {
                break;
            }
            *digit = 0;
        }
    }
    Ok(expected)
}
