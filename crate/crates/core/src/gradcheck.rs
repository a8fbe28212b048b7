//! Finite-difference verification of every tape primitive, every
//! distribution primitive, and the full per-sequence loss of small models.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::{grad_check, ParamSet, Tape, Var};
use crate::data::{EntityTrack, Sequence};
use crate::distributions::{
    categorical_kl, gaussian_kl, gaussian_log_pdf, gumbel_softmax_sample, label_cross_entropy, reparam_sample,
    CategoricalParams, GaussianParams,
};
use crate::error::Result;
use crate::model::{GroupSpec, Mode, Model, ModelSpec};
use crate::objectives::sequence_loss;
use crate::rng::{stream_rng, KeyedNoise};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub epsilon: f64,
    pub checks: Vec<CheckResult>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance
    }
}

fn random_array(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Array::from_vec(rows, cols, data).expect("sized")
}

/// `sum(w * v)` with fixed random weights so every output element matters.
fn project(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let [r, c] = tape.value(v).shape();
    let w = random_array(&mut stream_rng(&[seed, 0xfeed]), r, c, -1.0, 1.0);
    let w = tape.input(w);
    let m = tape.mul(v, w)?;
    tape.sum(m)
}

type Build = fn(&mut Tape<'_>, u64) -> Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Build)> {
    fn p(t: &mut Tape<'_>, name: &str) -> Var {
        t.param_named(name).expect("declared")
    }
    vec![
        ("matmul", |t, s| {
            let (a, b) = (p(t, "a"), p(t, "m"));
            let v = t.matmul(a, b)?;
            project(t, v, s)
        }),
        ("add", |t, s| {
            let (a, b) = (p(t, "a"), p(t, "b"));
            let v = t.add(a, b)?;
            project(t, v, s)
        }),
        ("add_broadcast", |t, s| {
            let (a, r) = (p(t, "a"), p(t, "row"));
            let v = t.add(a, r)?;
            project(t, v, s)
        }),
        ("sub", |t, s| {
            let (a, b) = (p(t, "a"), p(t, "b"));
            let v = t.sub(a, b)?;
            project(t, v, s)
        }),
        ("mul", |t, s| {
            let (a, b) = (p(t, "a"), p(t, "b"));
            let v = t.mul(a, b)?;
            project(t, v, s)
        }),
        ("scale_offset", |t, s| {
            let a = p(t, "a");
            let v = t.scale(a, -1.7)?;
            let v = t.offset(v, 0.3)?;
            project(t, v, s)
        }),
        ("concat", |t, s| {
            let (a, b) = (p(t, "a"), p(t, "b"));
            let v = t.concat(&[a, b, a])?;
            project(t, v, s)
        }),
        ("slice", |t, s| {
            let a = p(t, "a");
            let c = t.value(a).cols();
            let v = t.slice(a, c / 3, c - c / 3)?;
            project(t, v, s)
        }),
        ("tanh", |t, s| {
            let a = p(t, "a");
            let v = t.tanh(a)?;
            project(t, v, s)
        }),
        ("sigmoid", |t, s| {
            let a = p(t, "a");
            let v = t.sigmoid(a)?;
            project(t, v, s)
        }),
        ("exp", |t, s| {
            let a = p(t, "a");
            let v = t.exp(a)?;
            project(t, v, s)
        }),
        ("log", |t, s| {
            let a = p(t, "pos");
            let v = t.log(a)?;
            project(t, v, s)
        }),
        ("softmax", |t, s| {
            let a = p(t, "a");
            let v = t.softmax(a)?;
            project(t, v, s)
        }),
        ("log_softmax", |t, s| {
            let a = p(t, "a");
            let v = t.log_softmax(a)?;
            project(t, v, s)
        }),
        ("sum", |t, _| {
            let a = p(t, "a");
            let sq = t.mul(a, a)?;
            t.sum(sq)
        }),
        ("mean", |t, _| {
            let a = p(t, "a");
            let e = t.exp(a)?;
            t.mean(e)
        }),
        ("mask_mul", |t, s| {
            let a = p(t, "a");
            let [r, c] = t.value(a).shape();
            let mut rng = stream_rng(&[s, 0xd0]);
            let mask: Vec<f64> = (0..r * c).map(|_| if rng.random::<f64>() < 0.9 { 1.0 / 0.9 } else { 0.0 }).collect();
            let v = t.mask_mul(a, Array::from_vec(r, c, mask)?)?;
            project(t, v, s)
        }),
        ("gaussian_kl", |t, _| {
            let q = GaussianParams { mu: p(t, "r1"), log_sigma: p(t, "r2") };
            let pp = GaussianParams { mu: p(t, "r3"), log_sigma: p(t, "r4") };
            gaussian_kl(t, &q, &pp)
        }),
        ("reparam_sample", |t, s| {
            let g = GaussianParams { mu: p(t, "r1"), log_sigma: p(t, "r2") };
            let c = t.value(g.mu).cols();
            let eps = random_array(&mut stream_rng(&[s, 0xe5]), 1, c, -2.0, 2.0);
            let v = reparam_sample(t, &g, &eps)?;
            project(t, v, s)
        }),
        ("gaussian_log_pdf", |t, _| {
            let g = GaussianParams { mu: p(t, "r1"), log_sigma: p(t, "r2") };
            let x = p(t, "r3");
            gaussian_log_pdf(t, x, &g)
        }),
        ("categorical_kl", |t, _| {
            let q = CategoricalParams::new(p(t, "r1"));
            let pp = CategoricalParams::new(p(t, "r2"));
            categorical_kl(t, &q, &pp)
        }),
        ("gumbel_softmax_sample", |t, s| {
            let l = p(t, "r1");
            let c = t.value(l).cols();
            let u = random_array(&mut stream_rng(&[s, 0x6b]), 1, c, 0.05, 0.95);
            let v = gumbel_softmax_sample(t, l, 0.7, &u)?.vector;
            project(t, v, s)
        }),
        ("label_cross_entropy", |t, s| {
            let l = p(t, "r1");
            let c = t.value(l).cols();
            let k = stream_rng(&[s, 0x1c]).random_range(0..c);
            label_cross_entropy(t, &Array::one_hot(c, k), &CategoricalParams::new(l))
        }),
    ]
}

fn primitive_params(seed: u64) -> ParamSet {
    let mut rng = stream_rng(&[seed, 0xabc]);
    let r = rng.random_range(1..=4);
    let c = rng.random_range(2..=8);
    let k = rng.random_range(1..=8);
    let d = rng.random_range(2..=8);
    let mut ps = ParamSet::new();
    let mut put = |name: &str, a: Array| {
        ps.insert(name, a).expect("unique");
    };
    put("a", random_array(&mut rng, r, c, -1.5, 1.5));
    put("b", random_array(&mut rng, r, c, -1.5, 1.5));
    put("m", random_array(&mut rng, c, k, -1.0, 1.0));
    put("row", random_array(&mut rng, 1, c, -1.0, 1.0));
    put("pos", random_array(&mut rng, r, c, 0.3, 2.0));
    for name in ["r1", "r2", "r3", "r4"] {
        put(name, random_array(&mut rng, 1, d, -1.0, 1.0));
    }
    ps
}

/// Worst relative error of every primitive on random inputs for one seed.
pub fn check_primitives(seed: u64, epsilon: f64) -> Result<Vec<CheckResult>> {
    let params = primitive_params(seed);
    primitive_cases()
        .into_iter()
        .map(|(name, build)| {
            let max_error = grad_check(&params, epsilon, |t| build(t, seed))?;
            Ok(CheckResult {
                name: name.to_string(),
                max_error,
            })
        })
        .collect()
}

/// The small end-to-end configuration: 2 steps, `dim_x = 3`, `dim_z = 2`,
/// two classes, width 4.
pub fn tiny_spec() -> ModelSpec {
    let mut s = ModelSpec::flat(3, 2).with_width(4, 2, 1);
    s.decoder_width = 4;
    s
}

pub fn tiny_hierarchical_spec() -> ModelSpec {
    tiny_spec().with_parent(2)
}

pub fn tiny_multi_entity_spec() -> ModelSpec {
    tiny_spec().with_others(
        GroupSpec {
            name: "object".into(),
            dim_x: 2,
            dim_y: 2,
            dim_c: None,
        },
        2,
    )
}

/// A recording shaped for `spec` with the first step labeled and the rest
/// unobserved.
pub fn tiny_sequence(spec: &ModelSpec, len: usize, seed: u64) -> Sequence {
    let mut rng = stream_rng(&[seed, 0x5e9]);
    let entities = (0..spec.n_entities())
        .map(|e| {
            let g = spec.group_of(e);
            let frames = (0..len)
                .map(|_| (0..g.dim_x).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            EntityTrack::new(if e == 0 { "subject" } else { "object" }, g.name.clone(), frames)
        })
        .collect();
    let labels = (0..len).map(|t| (t == 0).then_some(1)).collect();
    let parents = if spec.variant.is_hierarchical() {
        (0..len).map(|t| (t == 0).then_some(0)).collect()
    } else {
        Vec::new()
    };
    Sequence {
        id: "tiny".into(),
        entities,
        labels,
        parents,
    }
}

/// Finite-difference check of the full sequence loss with respect to every
/// model parameter.
pub fn check_model(spec: &ModelSpec, seq: &Sequence, seed: u64, mode: Mode, epsilon: f64) -> Result<f64> {
    let (model, params) = Model::init(spec, seed)?;
    grad_check(&params, epsilon, |tape| {
        let mut noise = KeyedNoise::new(seed, 0, 0);
        Ok(sequence_loss(&model, tape, seq, &mut noise, mode)?.0)
    })
}

/// Every primitive (over `primitive_seeds` random draws) plus the tiny flat,
/// hierarchical and multi-entity models.
pub fn run_suite(seed: u64, primitive_seeds: u64, epsilon: f64) -> Result<GradReport> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for s in 0..primitive_seeds {
        for r in check_primitives(seed.wrapping_add(s), epsilon)? {
            match worst.iter_mut().find(|w| w.name == r.name) {
                Some(w) => w.max_error = w.max_error.max(r.max_error),
                None => worst.push(r),
            }
        }
    }
    let models = [
        ("model.flat", tiny_spec(), Mode::Sample),
        ("model.flat.dropout", tiny_spec(), Mode::Train),
        ("model.hierarchical", tiny_hierarchical_spec(), Mode::Sample),
        ("model.multi_entity", tiny_multi_entity_spec(), Mode::Sample),
    ];
    for (name, spec, mode) in models {
        let seq = tiny_sequence(&spec, 2, seed);
        worst.push(CheckResult {
            name: name.to_string(),
            max_error: check_model(&spec, &seq, seed, mode, epsilon)?,
        });
    }
    Ok(GradReport {
        epsilon,
        checks: worst,
    })
}
