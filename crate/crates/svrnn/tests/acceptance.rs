//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svrnn::checkpoint::Checkpoint;
use svrnn::run::{self, RunOptions};
use svrnn_core::autodiff::ParamSet;
use svrnn_core::data::{oracle_filter, synth_generate, EntityTrack, MaskLevel, MaskMode, OracleRecord, Sequence, SynthSpec};
use svrnn_core::distributions::{CategoricalParams, GaussianParams};
use svrnn_core::gradcheck::{run_suite, tiny_hierarchical_spec, tiny_multi_entity_spec, tiny_spec, DEFAULT_EPSILON};
use svrnn_core::model::{GroupSpec, LabelChoice, StepBeliefs, StepLabels};
use svrnn_core::objectives::{sequence_loss, step_loss, unlabeled_loss_exact, StepLoss};
use svrnn_core::rng::{KeyedNoise, NoiseRole, NoiseSource};
use svrnn_core::trainer::{evaluate, EvalOptions, MaskPolicy, Task, TrainConfig};
use svrnn_core::{Array, Mode, Model, ModelSpec, Tape};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient correctness", gradient_correctness),
        ("bound identities", bound_identities),
        ("relaxation consistency", relaxation_consistency),
        ("reduction laws", reduction_laws),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("semi-supervision benefit", semi_supervision_benefit),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!(
            "criterion {} ({name}): {verdict}; {} [{:.1}s]",
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let spec = tiny_spec();
    let g = &spec.groups[0];
    assert_eq!((g.dim_x, g.dim_y, spec.dim_z, spec.hidden_width), (3, 2, 2, 4));
    let report = run_suite(0, 20, DEFAULT_EPSILON).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .expect("checks");
    outcome(
        report.passes(1e-4) && secs < 60.0 && report.checks.len() > 20,
        format!(
            "{} checks, max relative error {:.2e} ({}), suite time {:.1}s",
            report.checks.len(),
            worst.max_error,
            worst.name,
            secs
        ),
    )
}

fn random_sequence(spec: &ModelSpec, rng: &mut ChaCha8Rng, len: usize) -> Sequence {
    let entities = (0..spec.n_entities())
        .map(|e| {
            let g = spec.group_of(e);
            let frames = (0..len).map(|_| (0..g.dim_x).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            EntityTrack::new("e", g.name.clone(), frames)
        })
        .collect();
    let dim_y = spec.groups[0].dim_y;
    let labels = (0..len).map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..dim_y))).collect();
    let parents = match spec.groups[0].dim_c {
        Some(c) => (0..len).map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..c))).collect(),
        None => Vec::new(),
    };
    Sequence {
        id: "draw".into(),
        entities,
        labels,
        parents,
    }
}

fn random_array(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array {
    Array::row(&(0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>())
}

fn bound_identities() -> Outcome {
    let specs = [tiny_spec(), tiny_hierarchical_spec(), tiny_multi_entity_spec()];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut min_term, mut max_forced): (f64, f64) = (f64::INFINITY, 0.0);
    let mut rows = 0usize;
    for draw in 0..1000u64 {
        let spec = &specs[draw as usize % 3];
        let (model, params) = Model::init(spec, draw).expect("init");
        let seq = random_sequence(spec, &mut rng, 3);
        let mut tape = Tape::new(&params);
        let mode = if draw % 2 == 0 { Mode::Train } else { Mode::Sample };
        let (_, trace) =
            sequence_loss(&model, &mut tape, &seq, &mut KeyedNoise::new(draw, 0, 0), mode).expect("loss");
        for s in &trace {
            for v in [s.kl_z, s.kl_y, s.kl_c, s.sup_y, s.sup_c] {
                min_term = min_term.min(v);
            }
        }
        rows += trace.len();

        let empty = ParamSet::new();
        let mut tape = Tape::new(&empty);
        let n = rng.random_range(2..6);
        let logits = tape.input(random_array(&mut rng, n, 4.0));
        let parent = tape.input(random_array(&mut rng, n + 1, 4.0));
        let mu = tape.input(random_array(&mut rng, 3, 3.0));
        let ls = tape.input(random_array(&mut rng, 3, 2.0));
        let g = GaussianParams { mu, log_sigma: ls };
        let beliefs = StepBeliefs {
            label_prior: CategoricalParams::new(logits),
            label_posterior: CategoricalParams::new(logits),
            parent_prior: Some(CategoricalParams::new(parent)),
            parent_posterior: Some(CategoricalParams::new(parent)),
            latent_prior: g,
            latent_posterior: g,
            decoded: vec![g],
        };
        let labels = StepLabels {
            y: LabelChoice::Unobserved,
            c: LabelChoice::Unobserved,
        };
        let v = step_loss(&mut tape, &beliefs, labels, None).expect("step").values(&tape, 0, 0);
        max_forced = max_forced.max(v.kl_z.abs()).max(v.kl_y.abs()).max(v.kl_c.abs());
    }
    outcome(
        min_term >= -1e-9 && max_forced < 1e-9,
        format!("1000 draws ({rows} step rows): smallest term {min_term:.3e}, largest KL with q = p {max_forced:.3e}"),
    )
}

/// Latent and observation noise fixed by `base`; label noise from `labels`.
struct SharedLatents {
    base: KeyedNoise,
    labels: KeyedNoise,
}

impl NoiseSource for SharedLatents {
    fn normals(&mut self, t: usize, e: usize, role: NoiseRole, n: usize) -> Array {
        self.base.normals(t, e, role, n)
    }
    fn uniforms(&mut self, t: usize, e: usize, role: NoiseRole, n: usize) -> Array {
        match role {
            NoiseRole::ChildLabel | NoiseRole::ParentLabel => self.labels.uniforms(t, e, role, n),
            _ => self.base.uniforms(t, e, role, n),
        }
    }
}

fn relaxation_consistency() -> Outcome {
    let mut spec = ModelSpec::flat(3, 3).with_width(4, 2, 1);
    spec.temperature = 1e-3;
    let (model, params) = Model::init(&spec, 5).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seq = random_sequence(&spec, &mut rng, 3);
    seq.labels = vec![None; 3];
    let base = KeyedNoise::new(77, 0, 0);
    let exact = unlabeled_loss_exact(&model, &params, &seq, &mut base.clone(), Mode::Sample).expect("exact");
    let n = 10_000u64;
    let (mut sum, mut sq) = (0.0, 0.0);
    for k in 0..n {
        let mut noise = SharedLatents {
            base,
            labels: KeyedNoise::new(1000 + k, 0, 0),
        };
        let mut tape = Tape::new(&params);
        let (v, _) = sequence_loss(&model, &mut tape, &seq, &mut noise, Mode::Sample).expect("loss");
        let v = tape.scalar(v);
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean).max(0.0) / (n as f64 - 1.0)).sqrt();
    let z = (mean - exact).abs() / se;
    outcome(
        z < 3.0,
        format!("exact {exact:.6}, Monte-Carlo mean {mean:.6} ± {se:.2e} over {n} draws ({z:.2} standard errors)"),
    )
}

fn largest_deviation(a: &[StepLoss], b: &[StepLoss]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!((x.t, x.entity), (y.t, y.entity));
        for (u, v) in [
            (x.recon, y.recon),
            (x.kl_z, y.kl_z),
            (x.kl_y, y.kl_y),
            (x.kl_c, y.kl_c),
            (x.sup_y, y.sup_y),
            (x.sup_c, y.sup_c),
            (x.label_const, y.label_const),
            (x.total(1.0), y.total(1.0)),
        ] {
            worst = worst.max((u - v).abs());
        }
    }
    worst
}

fn reduction_laws() -> Outcome {
    let mut flat = ModelSpec::flat(3, 3).with_width(6, 2, 2);
    flat.residual_mode = true;
    let object = GroupSpec {
        name: "object".into(),
        dim_x: 2,
        dim_y: 2,
        dim_c: None,
    };
    let me = flat.clone().with_others(object, 0);
    let hier = flat.clone().with_parent(1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut me_bitwise, mut hier_worst) = (true, 0.0f64);
    let mut rows = 0;
    for seed in 0..20u64 {
        let (fm, fp) = Model::init(&flat, seed).expect("flat");
        let (mm, mp) = Model::init(&me, seed).expect("me");
        let (hm, hp0) = Model::init(&hier, seed).expect("hier");
        let mut hp = ParamSet::new();
        for (name, value) in hp0.iter() {
            let v = match fp.by_name(name) {
                Some(f) => f.clone(),
                None if name.ends_with(".c") => Array::zeros(value.rows(), value.cols()),
                None => value.clone(),
            };
            hp.insert(name, v).expect("insert");
        }
        let hm = Model::bind(hm.spec(), &hp).expect("bind");
        let seq = random_sequence(&flat, &mut rng, 6);
        let mut hseq = seq.clone();
        hseq.parents = (0..6).map(|t| (t % 2 == 0).then_some(0)).collect();
        for mode in [Mode::Train, Mode::Sample] {
            let trace = |m: &Model, p: &ParamSet, s: &Sequence| {
                let mut tape = Tape::new(p);
                sequence_loss(m, &mut tape, s, &mut KeyedNoise::new(seed, 1, 2), mode).expect("loss").1
            };
            let f = trace(&fm, &fp, &seq);
            me_bitwise &= f == trace(&mm, &mp, &seq);
            hier_worst = hier_worst.max(largest_deviation(&f, &trace(&hm, &hp, &hseq)));
            rows += f.len();
        }
    }
    outcome(
        me_bitwise && hier_worst < 1e-12,
        format!(
            "{rows} step rows: multi-entity without others bit-identical = {me_bitwise}, \
             largest hierarchical (one parent class) deviation {hier_worst:.2e}"
        ),
    )
}

struct Synthetic {
    spec: SynthSpec,
    train: Vec<Sequence>,
    test: Vec<Sequence>,
    oracle_accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b })
}

fn synthetic(unobserved: f64) -> Synthetic {
    let mut spec = SynthSpec::switching(3, 6, 1.0, 0.3, 0.9);
    spec.min_len = 60;
    spec.max_len = 60;
    spec.unobserved_fraction = unobserved;
    let (all, oracle) = synth_generate(&spec, 250, 1).expect("generate");
    let train = all[..200].to_vec();
    let mut test = all[200..].to_vec();
    let (mut hit, mut n) = (0usize, 0usize);
    for (seq, rec) in test.iter_mut().zip(&oracle[200..]) {
        let OracleRecord { modes, .. } = rec;
        seq.labels = modes.iter().map(|&m| Some(m)).collect();
        for (row, &m) in oracle_filter(&spec, seq).expect("filter").iter().zip(modes) {
            hit += usize::from(argmax(row) == m);
            n += 1;
        }
    }
    Synthetic {
        spec,
        train,
        test,
        oracle_accuracy: hit as f64 / n as f64,
    }
}

fn synthetic_model() -> ModelSpec {
    let mut spec = ModelSpec::flat(6, 3).with_width(32, 8, 1);
    spec.residual_mode = true;
    spec
}

const SYNTH_EPOCHS: usize = 15;

fn train_synthetic(train: &[Sequence], mask: Option<f64>) -> Checkpoint {
    let config = TrainConfig {
        epochs: SYNTH_EPOCHS,
        seed: 3,
        mask: mask.map(|fraction| MaskPolicy {
            fraction,
            mode: MaskMode::PerFrame,
            level: MaskLevel::Child,
        }),
        ..TrainConfig::default()
    };
    run::train(&synthetic_model(), &config, train, &RunOptions::default()).expect("training").0
}

fn detection_accuracy(ck: &Checkpoint, test: &[Sequence]) -> f64 {
    let opts = EvalOptions {
        repeats: 1,
        ..EvalOptions::default()
    };
    evaluate(&ck.model().expect("model"), &ck.params, test, &[Task::Detect], &opts)
        .expect("eval")
        .mean(Task::Detect, "accuracy")
        .expect("metric")
}

fn synthetic_end_to_end() -> Outcome {
    let data = synthetic(0.25);
    let start = Instant::now();
    let ck = train_synthetic(&data.train, None);
    let train_secs = start.elapsed().as_secs_f64();
    let model = ck.model().expect("model");
    let opts = EvalOptions {
        repeats: 3,
        horizon: 10,
        forecast_samples: 20,
        seed: 11,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &ck.params, &data.test, &[Task::Detect, Task::Anticipate, Task::Forecast], &opts)
        .expect("evaluate");
    let detect = report.mean(Task::Detect, "accuracy").expect("detect");
    let anticipate = report.mean(Task::Anticipate, "accuracy").expect("anticipate");
    let forecast_err = report.mean(Task::Forecast, "accumulated_sq_error").expect("forecast");
    let frozen = report.mean(Task::Forecast, "frozen_pose_error").expect("frozen");
    let stationary = data.spec.stationary();
    let guess = argmax(&stationary);
    let (mut hit, mut n) = (0usize, 0usize);
    for seq in &data.test {
        for l in seq.labels.iter().skip(1) {
            hit += usize::from(*l == Some(guess));
            n += 1;
        }
    }
    let baseline = hit as f64 / n as f64;
    let a = detect >= 0.9 * data.oracle_accuracy;
    let b = anticipate > baseline;
    let c = forecast_err < frozen;
    outcome(
        a && b && c && train_secs < 900.0,
        format!(
            "(a) detection {detect:.3} vs 0.9 x forward filter {:.3} [{}]; (b) anticipation {anticipate:.3} vs \
             stationary guess {baseline:.3} [{}]; (c) 10-frame error {forecast_err:.2} vs frozen pose {frozen:.2} [{}]; \
             training {train_secs:.0}s",
            0.9 * data.oracle_accuracy,
            if a { "ok" } else { "miss" },
            if b { "ok" } else { "miss" },
            if c { "ok" } else { "miss" },
        ),
    )
}

fn semi_supervision_benefit() -> Outcome {
    let data = synthetic(0.0);
    let full = detection_accuracy(&train_synthetic(&data.train, None), &data.test);
    let partial = detection_accuracy(&train_synthetic(&data.train, Some(0.75)), &data.test);
    let blind = detection_accuracy(&train_synthetic(&data.train, Some(1.0)), &data.test);
    outcome(
        full - partial <= 0.05 && blind < partial && blind < full,
        format!("detection accuracy: all labels {full:.3}, 75% hidden {partial:.3}, all hidden {blind:.3}"),
    )
}

fn small_run_config() -> (ModelSpec, TrainConfig, Vec<Sequence>) {
    let mut synth = SynthSpec::switching(2, 4, 1.0, 0.3, 0.9);
    synth.min_len = 12;
    synth.max_len = 16;
    synth.unobserved_fraction = 0.3;
    let (data, _) = synth_generate(&synth, 16, 6).expect("generate");
    let mut spec = ModelSpec::flat(4, 2).with_width(12, 3, 2);
    spec.residual_mode = true;
    let config = TrainConfig {
        epochs: 50,
        batch_size: 8,
        seed: 21,
        ..TrainConfig::default()
    };
    (spec, config, data)
}

fn loss_columns(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

fn determinism_and_persistence() -> Outcome {
    let (spec, config, data) = small_run_config();
    let dir = tempfile::tempdir().expect("tempdir");
    let out = |name: &str| dir.path().join(name);
    let run_to = |name: &str, stop: Option<u64>| {
        std::fs::create_dir_all(out(name)).expect("mkdir");
        let opts = RunOptions {
            out_dir: Some(&out(name)),
            stop_at: stop,
            ..RunOptions::default()
        };
        run::train(&spec, &config, &data, &opts).expect("train")
    };
    let (ck_a, log_a) = run_to("a", Some(100));
    let (_, log_b) = run_to("b", Some(100));
    let read = |p: &Path| std::fs::read(p).expect("read");
    let same_ckpt = read(&out("a").join("checkpoint.ckpt")) == read(&out("b").join("checkpoint.ckpt"));
    let same_log = loss_columns(&log_a.to_csv()) == loss_columns(&log_b.to_csv());

    let (_, first_half) = run_to("half", Some(50));
    let saved = Checkpoint::load(out("half").join("checkpoint.ckpt")).expect("load");
    let opts = RunOptions {
        stop_at: Some(100),
        ..RunOptions::default()
    };
    let (ck_resumed, second_half) = run::resume(&saved, &data, &opts).expect("resume");
    let mut joined = first_half.records();
    joined.extend(second_half.records());
    let step_for_step = joined == log_a.records();
    let same_final = ck_resumed.to_bytes() == ck_a.to_bytes();

    let bin = env!("CARGO_BIN_EXE_svrnn");
    let cli = |args: &[&str]| {
        let status = Command::new(bin).args(args).status().expect("spawn");
        assert!(status.success(), "svrnn {args:?} failed");
    };
    let data_file = out("data.jsonl");
    svrnn::format::save_sequences(&data_file, &data).expect("save");
    let d = data_file.to_str().expect("utf8");
    for name in ["cli1", "cli2"] {
        let o = out(name);
        cli(&["train", "--data", d, "--out", o.to_str().unwrap(), "--epochs", "3", "--seed", "4"]);
    }
    let settings = |name: &str| {
        let text = std::fs::read_to_string(out(name).join("run_config.txt")).expect("run config");
        text.lines().filter(|l| !l.starts_with("out = ")).map(String::from).collect::<Vec<_>>()
    };
    let files = ["checkpoint.ckpt", "spec.json"];
    let cli_same = files.iter().all(|f| read(&out("cli1").join(f)) == read(&out("cli2").join(f)))
        && settings("cli1") == settings("cli2")
        && loss_columns(&std::fs::read_to_string(out("cli1").join("train_log.csv")).unwrap())
            == loss_columns(&std::fs::read_to_string(out("cli2").join("train_log.csv")).unwrap());
    outcome(
        same_ckpt && same_log && step_for_step && same_final && cli_same,
        format!(
            "same-seed checkpoints identical = {same_ckpt}, loss logs identical = {same_log}, \
             100 steps vs 50 + 50 resumed: rows equal = {step_for_step}, final checkpoint equal = {same_final}, \
             CLI artifacts identical = {cli_same}"
        ),
    )
}
