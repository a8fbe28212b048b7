use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::stream_rng;

/// Linear dynamics `x_t = a x_{t-1} + b` of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDynamics {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// Markov-switching linear dynamics. The first frame is drawn from
/// `N(0, init_scale^2 I)` regardless of mode; each later frame follows the
/// dynamics of the current mode plus isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim_x: usize,
    pub transition: Vec<Vec<f64>>,
    /// Distribution of the first mode.
    pub initial: Vec<f64>,
    pub dynamics: Vec<ModeDynamics>,
    pub noise: f64,
    pub init_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub unobserved_fraction: f64,
}

/// True modes of a generated recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub id: String,
    pub modes: Vec<usize>,
}

impl SynthSpec {
    /// Sticky chain (self-transition `stay`), contraction `0.8 I`, and mode
    /// offsets of size `separation` on disjoint coordinates.
    pub fn switching(n_modes: usize, dim_x: usize, separation: f64, noise: f64, stay: f64) -> Self {
        let off = if n_modes > 1 { (1.0 - stay) / (n_modes - 1) as f64 } else { 0.0 };
        let transition = (0..n_modes)
            .map(|i| (0..n_modes).map(|j| if i == j { if n_modes > 1 { stay } else { 1.0 } } else { off }).collect())
            .collect();
        let dynamics = (0..n_modes)
            .map(|k| ModeDynamics {
                a: (0..dim_x)
                    .map(|r| (0..dim_x).map(|c| if r == c { 0.8 } else { 0.0 }).collect())
                    .collect(),
                b: (0..dim_x)
                    .map(|d| if d % n_modes == k { separation } else { -separation / n_modes as f64 })
                    .collect(),
            })
            .collect();
        SynthSpec {
            dim_x,
            transition,
            initial: vec![1.0 / n_modes as f64; n_modes],
            dynamics,
            noise,
            init_scale: 1.0,
            min_len: 60,
            max_len: 60,
            unobserved_fraction: 0.0,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.dynamics.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_modes();
        let simplex = |row: &[f64]| row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        let mut problems = Vec::new();
        if k == 0 || self.dim_x == 0 {
            problems.push(String::from("need at least one mode and dim_x >= 1"));
        }
        if self.transition.len() != k || self.transition.iter().any(|r| r.len() != k || !simplex(r)) {
            problems.push(format!("transition must be {k}x{k} with rows on the simplex"));
        }
        if self.initial.len() != k || !simplex(&self.initial) {
            problems.push(String::from("initial must be a distribution over the modes"));
        }
        for (i, d) in self.dynamics.iter().enumerate() {
            if d.b.len() != self.dim_x || d.a.len() != self.dim_x || d.a.iter().any(|r| r.len() != self.dim_x) {
                problems.push(format!("dynamics[{i}] has the wrong shape"));
            }
        }
        if !(self.noise >= 0.0) || !(self.init_scale >= 0.0) {
            problems.push(String::from("noise and init_scale must be non-negative"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            problems.push(String::from("need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.unobserved_fraction) {
            problems.push(String::from("unobserved_fraction must lie in [0, 1]"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }

    /// Stationary distribution of the mode chain (power iteration).
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.n_modes();
        let mut p = vec![1.0 / k as f64; k];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..k).map(|j| (0..k).map(|i| p[i] * self.transition[i][j]).sum()).collect();
            let diff: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if diff < 1e-15 {
                break;
            }
        }
        p
    }

    fn mean(&self, mode: usize, prev: &[f64]) -> Vec<f64> {
        let d = &self.dynamics[mode];
        d.a.iter()
            .zip(&d.b)
            .map(|(row, b)| row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates `n_sequences` single-entity recordings labeled with their modes
/// (a fraction hidden per the spec) and the true mode sequences.
pub fn synth_generate(spec: &SynthSpec, n_sequences: usize, seed: u64) -> Result<(Vec<Sequence>, Vec<OracleRecord>)> {
    spec.validate()?;
    let mut data = Vec::with_capacity(n_sequences);
    let mut oracle = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let mut rng = stream_rng(&[seed, i as u64]);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut modes: Vec<usize> = Vec::with_capacity(len);
        let mut frames: Vec<Vec<f64>> = Vec::with_capacity(len);
        for t in 0..len {
            let m = if t == 0 {
                draw(&mut rng, &spec.initial)
            } else {
                draw(&mut rng, &spec.transition[modes[t - 1]])
            };
            modes.push(m);
            let base = if t == 0 { vec![0.0; spec.dim_x] } else { spec.mean(m, &frames[t - 1]) };
            let scale = if t == 0 { spec.init_scale } else { spec.noise };
            let frame = base
                .into_iter()
                .map(|mu| {
                    let e: f64 = rng.sample(StandardNormal);
                    mu + scale * e
                })
                .collect();
            frames.push(frame);
        }
        let labels = modes
            .iter()
            .map(|&m| {
                let hide = rng.random::<f64>() < spec.unobserved_fraction;
                (!hide).then_some(m)
            })
            .collect();
        let id = format!("synth-{i:05}");
        data.push(Sequence::single(id.clone(), frames, labels));
        oracle.push(OracleRecord { id, modes });
    }
    Ok((data, oracle))
}

/// Exact forward-algorithm posterior over modes for every frame of the first
/// entity, using the known dynamics.
pub fn oracle_filter(spec: &SynthSpec, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let k = spec.n_modes();
    if k > 1 && !(spec.noise > 0.0) {
        return Err(Error::invalid("filtering several modes requires noise > 0"));
    }
    let frames = &seq
        .entities
        .first()
        .ok_or_else(|| Error::InvalidData(format!("recording `{}` has no entities", seq.id)))?
        .frames;
    if frames.iter().any(|f| f.len() != spec.dim_x) {
        return Err(Error::InvalidData(format!("recording `{}` does not have width {}", seq.id, spec.dim_x)));
    }
    let log_t: Vec<Vec<f64>> = spec.transition.iter().map(|r| r.iter().map(|&p| math::ln(p)).collect()).collect();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(frames.len());
    let mut log_alpha: Vec<f64> = spec.initial.iter().map(|&p| math::ln(p)).collect();
    for t in 0..frames.len() {
        if t > 0 {
            let var = spec.noise * spec.noise;
            log_alpha = (0..k)
                .map(|j| {
                    let terms: Vec<f64> = (0..k).map(|i| log_alpha[i] + log_t[i][j]).collect();
                    let prior = math::log_sum_exp(&terms);
                    if k == 1 {
                        return prior;
                    }
                    let mu = spec.mean(j, &frames[t - 1]);
                    let sq: f64 = mu.iter().zip(&frames[t]).map(|(m, x)| (x - m) * (x - m)).sum();
                    prior - 0.5 * sq / var
                })
                .collect();
        }
        let z = math::log_sum_exp(&log_alpha);
        log_alpha.iter_mut().for_each(|v| *v -= z);
        out.push(log_alpha.iter().map(|&v| math::exp(v)).collect());
    }
    Ok(out)
}
