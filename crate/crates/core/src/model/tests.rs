use super::*;
use crate::data::Sequence;
use crate::gradcheck::{tiny_hierarchical_spec, tiny_multi_entity_spec, tiny_sequence, tiny_spec};
use crate::objectives::sequence_loss;
use crate::rng::KeyedNoise;
use alloc::string::ToString;

/// Counts label draws; forwards everything to keyed noise.
struct Counting {
    inner: KeyedNoise,
    label_draws: usize,
}

impl NoiseSource for Counting {
    fn normals(&mut self, t: usize, e: usize, role: NoiseRole, n: usize) -> Array {
        self.inner.normals(t, e, role, n)
    }
    fn uniforms(&mut self, t: usize, e: usize, role: NoiseRole, n: usize) -> Array {
        if matches!(role, NoiseRole::ChildLabel | NoiseRole::ParentLabel) {
            self.label_draws += 1;
        }
        self.inner.uniforms(t, e, role, n)
    }
}

fn run_step(
    model: &Model,
    params: &ParamSet,
    seq: &Sequence,
    mode: Mode,
    noise: &mut dyn NoiseSource,
) -> (Vec<Vec<f64>>, RecurrentState) {
    let mut tape = Tape::new(params);
    let state = model.initial_state().to_vars(&mut tape);
    let mut ctx = StepContext {
        noise,
        mode,
        route: Route::Posterior,
        t: 0,
    };
    let out = model.step(&mut tape, &seq.frames_at(0), &seq.step_labels(0), &state, &mut ctx).unwrap();
    let probs = out.entities.iter().map(|e| e.beliefs.label_posterior.prob_values(&tape)).collect();
    (probs, RecurrentState::from_vars(&tape, &out.state))
}

#[test]
fn same_seed_same_parameters() {
    let spec = tiny_spec();
    let (_, a) = Model::init(&spec, 5).unwrap();
    let (_, b) = Model::init(&spec, 5).unwrap();
    let (_, c) = Model::init(&spec, 6).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
}

#[test]
fn presets_build() {
    let (m, p) = Model::init(&ModelSpec::detection_preset(5, 4), 0).unwrap();
    assert_eq!(m.spec().hidden_width, 256);
    assert_eq!(p.by_name("main.lstm.l0.h").unwrap().shape(), [256, 1024]);
}

#[test]
fn forget_gate_bias_starts_at_one() {
    let (_, p) = Model::init(&tiny_spec(), 0).unwrap();
    let b = p.by_name("main.lstm.l0.b").unwrap();
    assert_eq!(&b.data()[..4], &[0.0; 4]);
    assert_eq!(&b.data()[4..8], &[1.0; 4]);
    assert_eq!(&b.data()[8..], &[0.0; 8]);
}

#[test]
fn invalid_spec_lists_violations() {
    let mut spec = tiny_spec();
    spec.alpha = 0.0;
    spec.temperature = -1.0;
    let msg = Model::init(&spec, 0).unwrap_err().to_string();
    assert!(msg.contains("alpha") && msg.contains("temperature"), "{msg}");
}

#[test]
fn bind_checks_names_and_shapes() {
    let spec = tiny_spec();
    let (_, params) = Model::init(&spec, 0).unwrap();
    Model::bind(&spec, &params).unwrap();
    let mut wider = spec.clone();
    wider.hidden_width = 5;
    assert!(Model::bind(&wider, &params).is_err());
    assert!(Model::bind(&tiny_hierarchical_spec(), &params).is_err());
}

#[test]
fn zero_parameters_give_uniform_labels_and_zero_state() {
    let spec = tiny_spec();
    let (model, mut params) = Model::init(&spec, 0).unwrap();
    for v in params.values_mut() {
        v.scale_mut(0.0);
    }
    let seq = tiny_sequence(&spec, 1, 0).unlabeled();
    let (probs, state) = run_step(&model, &params, &seq, Mode::Sample, &mut KeyedNoise::new(0, 0, 0));
    assert_eq!(probs[0], vec![0.5, 0.5]);
    assert!(state.entities[0][0].h.max_abs() == 0.0);
    assert_eq!(model.initial_state(), RecurrentState::zeros(&spec));
}

#[test]
fn observed_labels_consume_no_label_noise() {
    let spec = tiny_hierarchical_spec();
    let (model, params) = Model::init(&spec, 1).unwrap();
    let mut seq = tiny_sequence(&spec, 1, 0);
    seq.labels[0] = Some(0);
    seq.parents[0] = Some(1);
    let mut noise = Counting {
        inner: KeyedNoise::new(0, 0, 0),
        label_draws: 0,
    };
    run_step(&model, &params, &seq, Mode::Train, &mut noise);
    assert_eq!(noise.label_draws, 0);
    run_step(&model, &params, &seq.unlabeled(), Mode::Train, &mut noise);
    assert_eq!(noise.label_draws, 2);
}

#[test]
fn infer_mode_is_deterministic() {
    let spec = tiny_spec();
    let (model, params) = Model::init(&spec, 1).unwrap();
    let seq = tiny_sequence(&spec, 1, 3).unlabeled();
    let a = run_step(&model, &params, &seq, Mode::Infer, &mut KeyedNoise::new(1, 0, 0));
    let b = run_step(&model, &params, &seq, Mode::Infer, &mut KeyedNoise::new(2, 9, 4));
    assert_eq!(a, b);
}

#[test]
fn shapes_follow_the_spec_and_state_moves() {
    let spec = tiny_hierarchical_spec();
    let (model, params) = Model::init(&spec, 2).unwrap();
    let seq = tiny_sequence(&spec, 1, 4);
    let mut tape = Tape::new(&params);
    let state = model.initial_state().to_vars(&mut tape);
    let mut noise = KeyedNoise::new(0, 0, 0);
    let mut ctx = StepContext {
        noise: &mut noise,
        mode: Mode::Sample,
        route: Route::Posterior,
        t: 0,
    };
    let out = model.step(&mut tape, &seq.frames_at(0), &seq.step_labels(0), &state, &mut ctx).unwrap();
    let b = &out.entities[0].beliefs;
    assert_eq!(b.label_prior.n_class(&tape), 2);
    assert_eq!(b.parent_posterior.unwrap().n_class(&tape), 2);
    assert_eq!(b.latent_posterior.dim(&tape), 2);
    assert_eq!(tape.value(b.latent_prior.log_sigma).cols(), 2);
    assert_eq!(b.decoded[0].dim(&tape), 3);
    assert_eq!(out.state.entities[0].len(), 1);
    assert!(tape.value(out.state.top(0)).max_abs() > 0.0);
    assert_ne!(tape.value(b.latent_prior.mu), tape.value(b.latent_posterior.mu));
}

#[test]
fn observation_changes_recognition_logits() {
    let spec = tiny_spec();
    let (model, params) = Model::init(&spec, 3).unwrap();
    let seq = tiny_sequence(&spec, 1, 5).unlabeled();
    let mut moved = seq.clone();
    moved.entities[0].frames[0][1] += 0.5;
    let a = run_step(&model, &params, &seq, Mode::Infer, &mut KeyedNoise::new(0, 0, 0));
    let b = run_step(&model, &params, &moved, Mode::Infer, &mut KeyedNoise::new(0, 0, 0));
    assert_ne!(a.0, b.0);
}

#[test]
fn history_changes_the_label_prior() {
    let spec = tiny_spec();
    let (model, params) = Model::init(&spec, 3).unwrap();
    let prior = |state: &RecurrentState| {
        let mut tape = Tape::new(&params);
        let vars = state.to_vars(&mut tape);
        model.next_label_beliefs(&mut tape, &vars).unwrap()[0].child.clone()
    };
    let zero = model.initial_state();
    let mut nudged = zero.clone();
    nudged.entities[0][0].h.set(0, 1, 1e-3);
    let (a, b) = (prior(&zero), prior(&nudged));
    assert!((a[0] - b[0]).abs() > 1e-9);
}

#[test]
fn step_errors_carry_the_timestep() {
    let spec = tiny_spec();
    let (model, params) = Model::init(&spec, 0).unwrap();
    let mut seq = tiny_sequence(&spec, 2, 0);
    seq.labels[1] = Some(7);
    let mut tape = Tape::new(&params);
    let mut noise = KeyedNoise::new(0, 0, 0);
    let err = sequence_loss(&model, &mut tape, &seq, &mut noise, Mode::Sample).unwrap_err();
    assert!(err.to_string().contains("label 7"), "{err}");
    let mut state = model.initial_state().to_vars(&mut tape);
    let mut ctx = StepContext {
        noise: &mut noise,
        mode: Mode::Sample,
        route: Route::Posterior,
        t: 4,
    };
    let bad = [Array::row(&[1.0, 2.0])];
    let err = model.step(&mut tape, &bad, &[StepLabels::unobserved()], &state, &mut ctx).unwrap_err();
    assert!(matches!(err, Error::AtStep { t: 4, entity: 0, .. }), "{err}");
    state.entities.clear();
    assert!(model.step(&mut tape, &bad, &[StepLabels::unobserved()], &state, &mut ctx).is_err());
}

#[test]
fn object_entities_share_one_parameter_group() {
    let base = ModelSpec::flat(3, 2).with_width(4, 2, 1);
    let object = GroupSpec {
        name: "object".into(),
        dim_x: 2,
        dim_y: 3,
        dim_c: None,
    };
    let count = |n| Model::init(&base.clone().with_others(object.clone(), n), 0).unwrap().1.len();
    assert_eq!(count(1), count(3));

    let spec = tiny_multi_entity_spec();
    let (model, params) = Model::init(&spec, 0).unwrap();
    assert!(!model.group_param_names(&params, 1).is_empty());
    let seq = tiny_sequence(&spec, 2, 0);
    let mut tape = Tape::new(&params);
    let mut noise = KeyedNoise::new(0, 0, 0);
    let (loss, _) = sequence_loss(&model, &mut tape, &seq, &mut noise, Mode::Sample).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.by_name("object.lift.x").unwrap().max_abs() > 0.0);
}

#[test]
fn aggregation_is_order_free_and_single_object_is_identity() {
    let spec = tiny_multi_entity_spec();
    let (model, params) = Model::init(&spec, 0).unwrap();
    let mut tape = Tape::new(&params);
    let v = |t: &mut Tape<'_>, x: f64| t.input(Array::row(&[x, x + 1.0]));
    let (a, b, c) = (v(&mut tape, 0.0), v(&mut tape, 1.0), v(&mut tape, 5.0));
    let one = model.entity_aggregate(&mut tape, &[a, b, c], &[a, b, c]).unwrap();
    let two = model.entity_aggregate(&mut tape, &[a, c, b], &[a, c, b]).unwrap();
    assert_eq!(tape.value(one[0].x_other.unwrap()), tape.value(two[0].x_other.unwrap()));
    assert_eq!(tape.value(one[2].history.h_other.unwrap()), tape.value(a));
    assert!(model.entity_aggregate(&mut tape, &[a], &[a]).is_err());
    let single = aggregate(&mut tape, &[a, b]).unwrap();
    assert_eq!(tape.value(single[0].1.unwrap()), tape.value(b));
}
