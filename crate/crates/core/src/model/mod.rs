//! The recurrent cell: label, latent and observation networks for every
//! entity group, stacked gated recurrence, and cross-entity conditioning.

mod layers;
mod spec;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use spec::{GroupSpec, ModelSpec, Variant};

use crate::array::Array;
use crate::autodiff::{ParamSet, Tape, Var};
use crate::distributions::{gumbel_softmax_sample, reparam_sample, CategoricalParams, GaussianParams};
use crate::error::{Error, Result};
use crate::rng::{NoiseRole, NoiseSource};
use layers::{dropout, Builder, Dense, GaussianNet, LayerCtx, LstmLayer, Mlp};

/// How stochastic a step is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, labels and latents sampled.
    Train,
    /// Dropout off, labels and latents sampled.
    Sample,
    /// Dropout off; unobserved labels take the most probable class and the
    /// latent takes its mean. Fully deterministic.
    Infer,
}

/// Which distributions supply unobserved labels and the latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Recognition networks `q(. | x, h)`.
    Posterior,
    /// History-only priors `p(. | h)`.
    Prior,
}

/// Label input for one entity at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelChoice {
    /// Observed label; consumed as an exact one-hot vector.
    Observed(usize),
    /// Not observed; realized from the model.
    Unobserved,
    /// Not observed, but pinned to a class. Used by exact enumeration.
    Forced(usize),
}

impl LabelChoice {
    pub fn from_option(label: Option<usize>) -> Self {
        label.map_or(LabelChoice::Unobserved, LabelChoice::Observed)
    }

    pub fn is_observed(self) -> bool {
        matches!(self, LabelChoice::Observed(_))
    }

    pub fn observed(self) -> Option<usize> {
        match self {
            LabelChoice::Observed(k) => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepLabels {
    pub y: LabelChoice,
    /// Ignored by non-hierarchical models.
    pub c: LabelChoice,
}

impl StepLabels {
    pub fn unobserved() -> Self {
        StepLabels {
            y: LabelChoice::Unobserved,
            c: LabelChoice::Unobserved,
        }
    }
}

/// Hidden and memory-cell values of one recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub h: Array,
    pub c: Array,
}

/// Recurrent state of every entity, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub entities: Vec<Vec<LayerState>>,
}

impl RecurrentState {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let w = spec.hidden_width;
        RecurrentState {
            entities: (0..spec.n_entities())
                .map(|_| {
                    (0..spec.recurrent_layers)
                        .map(|_| LayerState {
                            h: Array::zeros(1, w),
                            c: Array::zeros(1, w),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let ok = self.entities.len() == spec.n_entities()
            && self.entities.iter().all(|layers| {
                layers.len() == spec.recurrent_layers
                    && layers.iter().all(|l| {
                        l.h.shape() == [1, spec.hidden_width] && l.c.shape() == [1, spec.hidden_width]
                    })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("recurrent state does not match the model spec"))
        }
    }

    pub fn to_vars(&self, tape: &mut Tape<'_>) -> StateVars {
        StateVars {
            entities: self
                .entities
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|l| (tape.input(l.h.clone()), tape.input(l.c.clone())))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_vars(tape: &Tape<'_>, vars: &StateVars) -> Self {
        RecurrentState {
            entities: vars
                .entities
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|&(h, c)| LayerState {
                            h: tape.value(h).clone(),
                            c: tape.value(c).clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Top-layer hidden state of an entity.
    pub fn top(&self, entity: usize) -> &Array {
        &self.entities[entity].last().expect("at least one layer").h
    }
}

/// Recurrent state living on a tape.
#[derive(Debug, Clone)]
pub struct StateVars {
    /// Per entity, per layer `(h, c)`.
    pub entities: Vec<Vec<(Var, Var)>>,
}

impl StateVars {
    pub fn top(&self, entity: usize) -> Var {
        self.entities[entity].last().expect("at least one layer").0
    }
}

/// Own and others' top-layer history of one entity.
#[derive(Debug, Clone, Copy)]
pub struct History {
    pub h: Var,
    /// Sum over additional entities for the primary entity, the primary's for
    /// the others; absent in single-entity models.
    pub h_other: Option<Var>,
}

impl History {
    fn pieces(&self, out: &mut Vec<Var>) {
        out.push(self.h);
        out.extend(self.h_other);
    }
}

/// What one entity's networks see at a step.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    /// Lifted own observation.
    pub x: Var,
    /// Lifted observation of the others, aggregated like the history.
    pub x_other: Option<Var>,
    pub history: History,
}

impl Conditioning {
    fn x_pieces(&self, out: &mut Vec<Var>) {
        out.push(self.x);
        out.extend(self.x_other);
    }

    fn h_pieces(&self, out: &mut Vec<Var>) {
        self.history.pieces(out);
    }
}

/// Belief over the next step's labels from the history alone.
#[derive(Debug, Clone, PartialEq)]
pub struct NextLabelBelief {
    pub parent: Option<Vec<f64>>,
    /// Child-label probabilities, marginalized over the parent when present.
    pub child: Vec<f64>,
}

/// Distributions computed at one step for one entity.
#[derive(Debug, Clone)]
pub struct StepBeliefs {
    pub label_prior: CategoricalParams,
    pub label_posterior: CategoricalParams,
    pub parent_prior: Option<CategoricalParams>,
    pub parent_posterior: Option<CategoricalParams>,
    pub latent_prior: GaussianParams,
    pub latent_posterior: GaussianParams,
    /// Observation distribution for the next frame, one per latent sample.
    pub decoded: Vec<GaussianParams>,
}

/// One entity's beliefs and the values propagated from them.
#[derive(Debug, Clone)]
pub struct EntityStep {
    pub beliefs: StepBeliefs,
    pub labels: StepLabels,
    /// One-hot (observed or forced) or relaxed label vector fed downstream.
    pub y: Var,
    pub c: Option<Var>,
    /// Latent samples; the first one drives the recurrence.
    pub z: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub entities: Vec<EntityStep>,
    pub state: StateVars,
}

/// Per-call options for [`Model::step`].
pub struct StepContext<'n> {
    pub noise: &'n mut dyn NoiseSource,
    pub mode: Mode,
    pub route: Route,
    pub t: usize,
}

/// Primary entity gets the sum over the rest; the rest get the primary's.
fn aggregate(tape: &mut Tape<'_>, vs: &[Var]) -> Result<Vec<(Var, Option<Var>)>> {
    if vs.len() <= 1 {
        return Ok(vs.iter().map(|&v| (v, None)).collect());
    }
    let sum = tape.add_all(&vs[1..])?;
    let mut out = vec![(vs[0], Some(sum))];
    out.extend(vs[1..].iter().map(|&v| (v, Some(vs[0]))));
    Ok(out)
}

#[derive(Debug, Clone)]
struct GroupNets {
    lift: Dense,
    prior_c: Option<Mlp>,
    post_c: Option<Mlp>,
    prior_y: Mlp,
    post_y: Mlp,
    prior_z: GaussianNet,
    post_z: GaussianNet,
    decoder: GaussianNet,
    lstm: Vec<LstmLayer>,
}

/// Network structure of a [`ModelSpec`]; parameter values live in a
/// separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    groups: Vec<GroupNets>,
}

impl Model {
    /// Builds the networks and fresh parameters. Each parameter is drawn from
    /// its own stream keyed by `(seed, name)`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<(Model, ParamSet)> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let model = Self::build(
            spec,
            &mut Builder {
                params: &mut params,
                seed: Some(seed),
            },
        )?;
        Ok((model, params))
    }

    /// Resolves the networks against existing parameters by name and shape.
    pub fn bind(spec: &ModelSpec, params: &ParamSet) -> Result<Model> {
        spec.validate()?;
        let mut scratch = params.clone();
        let model = Self::build(
            spec,
            &mut Builder {
                params: &mut scratch,
                seed: None,
            },
        )?;
        Ok(model)
    }

    fn build(spec: &ModelSpec, b: &mut Builder<'_>) -> Result<Model> {
        let other = spec.n_entities() > 1;
        let (lw, hw, nw, dw) = (spec.lift_width, spec.hidden_width, spec.net_width, spec.decoder_width);
        let mut groups = Vec::new();
        for g in &spec.groups {
            let n = g.name.as_str();
            let mut xs: Vec<(&str, usize)> = vec![("x", lw)];
            let mut hs: Vec<(&str, usize)> = vec![("h", hw)];
            if other {
                xs.push(("xo", lw));
                hs.push(("ho", hw));
            }
            let cs: Vec<(&str, usize)> = g.dim_c.map(|c| ("c", c)).into_iter().collect();
            let cat = |parts: &[&[(&'static str, usize)]]| -> Vec<(&'static str, usize)> {
                parts.iter().flat_map(|p| p.iter().copied()).collect()
            };
            let y = [("y", g.dim_y)];
            let z = [("z", spec.dim_z)];

            let lift = Dense::new(b, &format!("{n}.lift"), &[("x", g.dim_x)], lw)?;
            let (prior_c, post_c) = match g.dim_c {
                Some(dc) => (
                    Some(Mlp::new(b, &format!("{n}.prior_c"), &hs, &[nw], dc)?),
                    Some(Mlp::new(b, &format!("{n}.post_c"), &cat(&[&xs, &hs]), &[nw], dc)?),
                ),
                None => (None, None),
            };
            let prior_y = Mlp::new(b, &format!("{n}.prior_y"), &cat(&[&hs, &cs]), &[nw], g.dim_y)?;
            let post_y = Mlp::new(b, &format!("{n}.post_y"), &cat(&[&xs, &hs, &cs]), &[nw], g.dim_y)?;
            let prior_z =
                GaussianNet::new(b, &format!("{n}.prior_z"), &cat(&[&y, &hs, &cs]), &[nw, nw], spec.dim_z)?;
            let post_z = GaussianNet::new(
                b,
                &format!("{n}.post_z"),
                &cat(&[&xs, &y, &hs, &cs]),
                &[nw, nw],
                spec.dim_z,
            )?;
            let decoder =
                GaussianNet::new(b, &format!("{n}.decoder"), &cat(&[&xs, &y, &z, &cs]), &[dw, dw], g.dim_x)?;
            let mut lstm = Vec::new();
            let ho: Vec<(&str, usize)> = if other { vec![("ho", hw)] } else { vec![] };
            let first = cat(&[&xs, &y, &z, &ho, &cs]);
            for l in 0..spec.recurrent_layers {
                let pieces: Vec<(&str, usize)> = if l == 0 { first.clone() } else { vec![("in", hw)] };
                lstm.push(LstmLayer::new(b, &format!("{n}.lstm.l{l}"), &pieces, hw)?);
            }
            groups.push(GroupNets {
                lift,
                prior_c,
                post_c,
                prior_y,
                post_y,
                prior_z,
                post_z,
                decoder,
                lstm,
            });
        }
        Ok(Model {
            spec: spec.clone(),
            groups,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState::zeros(&self.spec)
    }

    fn nets(&self, entity: usize) -> &GroupNets {
        &self.groups[self.spec.entities[entity]]
    }

    fn layer_ctx<'a>(&self, ctx: &'a mut StepContext<'_>, entity: usize) -> LayerCtx<'a> {
        LayerCtx {
            noise: &mut *ctx.noise,
            mode: ctx.mode,
            dropout_rate: self.spec.dropout_rate,
            t: ctx.t,
            entity,
        }
    }

    /// Lifts a raw observation through the entity's input layer.
    pub fn lift(&self, tape: &mut Tape<'_>, entity: usize, x: Var, ctx: &mut StepContext<'_>) -> Result<Var> {
        let nets = self.nets(entity);
        let pre = nets.lift.apply(tape, &[x])?;
        let act = tape.tanh(pre)?;
        dropout(tape, act, nets.lift.dropout_site(), &mut self.layer_ctx(ctx, entity))
    }

    /// History aggregation across entities: the primary entity sees the sum
    /// of the others' top hidden states, every other entity the primary's.
    pub fn history(&self, tape: &mut Tape<'_>, tops: &[Var]) -> Result<Vec<History>> {
        Ok(aggregate(tape, tops)?
            .into_iter()
            .map(|(h, h_other)| History { h, h_other })
            .collect())
    }

    /// Cross-entity conditioning: the primary entity sees the sums of the
    /// others' lifted observations and top hidden states; every other entity
    /// sees the primary's.
    pub fn entity_aggregate(&self, tape: &mut Tape<'_>, lifted: &[Var], tops: &[Var]) -> Result<Vec<Conditioning>> {
        let n = self.spec.n_entities();
        if lifted.len() != n || tops.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} entities, got {} observations and {} states",
                lifted.len(),
                tops.len()
            )));
        }
        let xs = aggregate(tape, lifted)?;
        let hs = self.history(tape, tops)?;
        Ok(xs
            .into_iter()
            .zip(hs)
            .map(|((x, x_other), history)| Conditioning { x, x_other, history })
            .collect())
    }

    /// Label beliefs for the step after `state`, from the priors alone.
    pub fn next_label_beliefs(&self, tape: &mut Tape<'_>, state: &StateVars) -> Result<Vec<NextLabelBelief>> {
        let n = self.spec.n_entities();
        let tops: Vec<Var> = (0..n).map(|e| state.top(e)).collect();
        let hist = self.history(tape, &tops)?;
        let mut quiet = crate::rng::KeyedNoise::new(0, 0, 0);
        let mut ctx = StepContext {
            noise: &mut quiet,
            mode: Mode::Infer,
            route: Route::Prior,
            t: 0,
        };
        let mut out = Vec::with_capacity(n);
        for (e, h) in hist.iter().enumerate() {
            let nets = self.nets(e);
            let mut ins = Vec::new();
            h.pieces(&mut ins);
            let belief = match &nets.prior_c {
                None => {
                    let logits = nets.prior_y.forward(tape, &ins, &mut self.layer_ctx(&mut ctx, e))?;
                    NextLabelBelief {
                        parent: None,
                        child: CategoricalParams::new(logits).prob_values(tape),
                    }
                }
                Some(prior_c) => {
                    let logits = prior_c.forward(tape, &ins, &mut self.layer_ctx(&mut ctx, e))?;
                    let pc = CategoricalParams::new(logits).prob_values(tape);
                    let mut child = vec![0.0; self.spec.group_of(e).dim_y];
                    for (k, &w) in pc.iter().enumerate() {
                        let c = tape.input(Array::one_hot(pc.len(), k));
                        let mut with_c = ins.clone();
                        with_c.push(c);
                        let logits = nets.prior_y.forward(tape, &with_c, &mut self.layer_ctx(&mut ctx, e))?;
                        let py = CategoricalParams::new(logits).prob_values(tape);
                        for (acc, p) in child.iter_mut().zip(py) {
                            *acc += w * p;
                        }
                    }
                    NextLabelBelief { parent: Some(pc), child }
                }
            };
            out.push(belief);
        }
        Ok(out)
    }

    pub fn parent_prior(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        ctx: &mut StepContext<'_>,
    ) -> Result<Option<CategoricalParams>> {
        let Some(net) = &self.nets(entity).prior_c else { return Ok(None) };
        let mut ins = Vec::new();
        cond.h_pieces(&mut ins);
        let logits = net.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))?;
        Ok(Some(CategoricalParams::new(logits)))
    }

    pub fn parent_posterior(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        ctx: &mut StepContext<'_>,
    ) -> Result<Option<CategoricalParams>> {
        let Some(net) = &self.nets(entity).post_c else { return Ok(None) };
        let mut ins = Vec::new();
        cond.x_pieces(&mut ins);
        cond.h_pieces(&mut ins);
        let logits = net.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))?;
        Ok(Some(CategoricalParams::new(logits)))
    }

    /// `p(y | h, c)`.
    pub fn label_prior(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        parent: Option<Var>,
        ctx: &mut StepContext<'_>,
    ) -> Result<CategoricalParams> {
        let mut ins = Vec::new();
        cond.h_pieces(&mut ins);
        self.push_parent(entity, parent, &mut ins)?;
        let logits = self.nets(entity).prior_y.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))?;
        Ok(CategoricalParams::new(logits))
    }

    /// `q(y | x, h, c)`.
    pub fn label_posterior(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        parent: Option<Var>,
        ctx: &mut StepContext<'_>,
    ) -> Result<CategoricalParams> {
        let mut ins = Vec::new();
        cond.x_pieces(&mut ins);
        cond.h_pieces(&mut ins);
        self.push_parent(entity, parent, &mut ins)?;
        let logits = self.nets(entity).post_y.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))?;
        Ok(CategoricalParams::new(logits))
    }

    /// `p(z | y, h, c)`.
    pub fn latent_prior(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        y: Var,
        parent: Option<Var>,
        ctx: &mut StepContext<'_>,
    ) -> Result<GaussianParams> {
        let mut ins = vec![y];
        cond.h_pieces(&mut ins);
        self.push_parent(entity, parent, &mut ins)?;
        self.nets(entity).prior_z.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))
    }

    /// `q(z | x, y, h, c)`.
    pub fn latent_posterior(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        y: Var,
        parent: Option<Var>,
        ctx: &mut StepContext<'_>,
    ) -> Result<GaussianParams> {
        let mut ins = Vec::new();
        cond.x_pieces(&mut ins);
        ins.push(y);
        cond.h_pieces(&mut ins);
        self.push_parent(entity, parent, &mut ins)?;
        self.nets(entity).post_z.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))
    }

    /// Distribution of the next observation (or of its increment in residual
    /// mode) given the current lifted observation, label and latent.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        y: Var,
        z: Var,
        parent: Option<Var>,
        ctx: &mut StepContext<'_>,
    ) -> Result<GaussianParams> {
        let mut ins = Vec::new();
        cond.x_pieces(&mut ins);
        ins.push(y);
        ins.push(z);
        self.push_parent(entity, parent, &mut ins)?;
        self.nets(entity).decoder.forward(tape, &ins, &mut self.layer_ctx(ctx, entity))
    }

    /// Stacked gated recurrent update for one entity.
    #[allow(clippy::too_many_arguments)]
    pub fn recurrence(
        &self,
        tape: &mut Tape<'_>,
        entity: usize,
        cond: &Conditioning,
        y: Var,
        z: Var,
        parent: Option<Var>,
        prev: &[(Var, Var)],
    ) -> Result<Vec<(Var, Var)>> {
        let nets = self.nets(entity);
        if prev.len() != nets.lstm.len() {
            return Err(Error::invalid("recurrent layer count does not match the spec"));
        }
        let mut ins = Vec::new();
        cond.x_pieces(&mut ins);
        ins.push(y);
        ins.push(z);
        ins.extend(cond.history.h_other);
        self.push_parent(entity, parent, &mut ins)?;
        let mut out = Vec::with_capacity(prev.len());
        for (layer, &(h, c)) in nets.lstm.iter().zip(prev) {
            let (h2, c2) = layer.step(tape, &ins, h, c)?;
            out.push((h2, c2));
            ins = vec![h2];
        }
        Ok(out)
    }

    fn push_parent(&self, entity: usize, parent: Option<Var>, ins: &mut Vec<Var>) -> Result<()> {
        match (self.spec.group_of(entity).dim_c.is_some(), parent) {
            (true, Some(c)) => {
                ins.push(c);
                Ok(())
            }
            (false, None) => Ok(()),
            (true, None) => Err(Error::invalid("hierarchical network needs a parent label")),
            (false, Some(_)) => Err(Error::invalid("flat network got a parent label")),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn realize_label(
        &self,
        tape: &mut Tape<'_>,
        choice: LabelChoice,
        prior: &CategoricalParams,
        posterior: &CategoricalParams,
        role: NoiseRole,
        entity: usize,
        ctx: &mut StepContext<'_>,
    ) -> Result<Var> {
        let n = posterior.n_class(tape);
        match choice {
            LabelChoice::Observed(k) | LabelChoice::Forced(k) => {
                if k >= n {
                    return Err(Error::InvalidData(format!("label {k} out of range for {n} classes")));
                }
                Ok(tape.input(Array::one_hot(n, k)))
            }
            LabelChoice::Unobserved => {
                let source = match ctx.route {
                    Route::Posterior => posterior,
                    Route::Prior => prior,
                };
                match ctx.mode {
                    Mode::Infer => {
                        let k = tape.value(source.logits).argmax();
                        Ok(tape.input(Array::one_hot(n, k)))
                    }
                    Mode::Train | Mode::Sample => {
                        let u = ctx.noise.uniforms(ctx.t, entity, role, n);
                        Ok(gumbel_softmax_sample(tape, source.logits, self.spec.temperature, &u)?.vector)
                    }
                }
            }
        }
    }

    /// One time step for every entity.
    ///
    /// `frames[e]` is entity `e`'s observation at this step. The parent label
    /// is resolved before the child label, and the child before the latent.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        frames: &[Array],
        labels: &[StepLabels],
        state: &StateVars,
        ctx: &mut StepContext<'_>,
    ) -> Result<StepOutput> {
        let n = self.spec.n_entities();
        if frames.len() != n || labels.len() != n || state.entities.len() != n {
            return Err(Error::invalid(format!("step expects {n} entities")).at_step(ctx.t, 0));
        }
        let mut lifted = Vec::with_capacity(n);
        for (e, f) in frames.iter().enumerate() {
            let dim_x = self.spec.group_of(e).dim_x;
            if f.shape() != [1, dim_x] {
                return Err(Error::InvalidData(format!(
                    "observation shape {:?}, expected [1, {dim_x}]",
                    f.shape()
                ))
                .at_step(ctx.t, e));
            }
            let x = tape.checked_input(f.clone()).map_err(|e2| e2.at_step(ctx.t, e))?;
            lifted.push(self.lift(tape, e, x, ctx).map_err(|e2| e2.at_step(ctx.t, e))?);
        }
        let tops: Vec<Var> = (0..n).map(|e| state.top(e)).collect();
        let conds = self.entity_aggregate(tape, &lifted, &tops)?;

        let mut entities = Vec::with_capacity(n);
        let mut next = Vec::with_capacity(n);
        for e in 0..n {
            let (step, layers) = self
                .entity_step(tape, e, &conds[e], labels[e], &state.entities[e], ctx)
                .map_err(|err| err.at_step(ctx.t, e))?;
            entities.push(step);
            next.push(layers);
        }
        Ok(StepOutput {
            entities,
            state: StateVars { entities: next },
        })
    }

    fn entity_step(
        &self,
        tape: &mut Tape<'_>,
        e: usize,
        cond: &Conditioning,
        labels: StepLabels,
        prev: &[(Var, Var)],
        ctx: &mut StepContext<'_>,
    ) -> Result<(EntityStep, Vec<(Var, Var)>)> {
        let parent_prior = self.parent_prior(tape, e, cond, ctx)?;
        let parent_posterior = self.parent_posterior(tape, e, cond, ctx)?;
        let c = match (&parent_prior, &parent_posterior) {
            (Some(p), Some(q)) => Some(self.realize_label(tape, labels.c, p, q, NoiseRole::ParentLabel, e, ctx)?),
            _ => None,
        };
        let label_prior = self.label_prior(tape, e, cond, c, ctx)?;
        let label_posterior = self.label_posterior(tape, e, cond, c, ctx)?;
        let y = self.realize_label(
            tape,
            labels.y,
            &label_prior,
            &label_posterior,
            NoiseRole::ChildLabel,
            e,
            ctx,
        )?;
        let latent_prior = self.latent_prior(tape, e, cond, y, c, ctx)?;
        let latent_posterior = self.latent_posterior(tape, e, cond, y, c, ctx)?;
        let source = match ctx.route {
            Route::Posterior => latent_posterior,
            Route::Prior => latent_prior,
        };
        let dz = self.spec.dim_z;
        let z: Vec<Var> = match ctx.mode {
            Mode::Infer => vec![source.mu],
            Mode::Train | Mode::Sample => {
                let k = self.spec.latent_samples;
                let noise = ctx.noise.normals(ctx.t, e, NoiseRole::Latent, dz * k);
                let mut zs = Vec::with_capacity(k);
                for s in 0..k {
                    let eps = Array::row(&noise.data()[s * dz..(s + 1) * dz]);
                    zs.push(reparam_sample(tape, &source, &eps)?);
                }
                zs
            }
        };
        let mut decoded = Vec::with_capacity(z.len());
        for &zs in &z {
            decoded.push(self.decode(tape, e, cond, y, zs, c, ctx)?);
        }
        let layers = self.recurrence(tape, e, cond, y, z[0], c, prev)?;
        Ok((
            EntityStep {
                beliefs: StepBeliefs {
                    label_prior,
                    label_posterior,
                    parent_prior,
                    parent_posterior,
                    latent_prior,
                    latent_posterior,
                    decoded,
                },
                labels,
                y,
                c,
                z,
            },
            layers,
        ))
    }

    /// Names of all parameters belonging to a group.
    pub fn group_param_names<'p>(&self, params: &'p ParamSet, group: usize) -> Vec<&'p str> {
        let prefix = format!("{}.", self.spec.groups[group].name);
        params
            .names()
            .iter()
            .filter(|n| n.starts_with(&prefix))
            .map(|n| n.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests;
