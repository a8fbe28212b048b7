use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, StandardUniform};

use crate::array::Array;
use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::distributions::{bound_log_sigma, GaussianParams};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{fnv1a, stream_rng, NoiseRole, NoiseSource};

use super::Mode;

/// Creates parameters (fresh, seeded per name) or binds existing ones.
pub(crate) struct Builder<'a> {
    pub params: &'a mut ParamSet,
    /// `Some(seed)` initializes new parameters; `None` binds by name.
    pub seed: Option<u64>,
}

pub(crate) enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    /// Zeros except `1.0` on columns `start..start + len`.
    OnesOn { start: usize, len: usize },
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        let Some(seed) = self.seed else {
            let id = self.params.id(name)?;
            let shape = self.params.get(id).shape();
            if shape != [rows, cols] {
                return Err(Error::InvalidSpec(format!(
                    "parameter `{name}` has shape {shape:?}, expected [{rows}, {cols}]"
                )));
            }
            return Ok(id);
        };
        let value = match init {
            Init::Zeros => Array::zeros(rows, cols),
            Init::OnesOn { start, len } => {
                let mut a = Array::zeros(rows, cols);
                for c in start..start + len {
                    a.set(0, c, 1.0);
                }
                a
            }
            Init::Glorot { fan_in, fan_out } => {
                let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
                let mut rng = stream_rng(&[seed, fnv1a(name.as_bytes())]);
                let data = (0..rows * cols)
                    .map(|_| {
                        let u: f64 = StandardUniform.sample(&mut rng);
                        bound * (2.0 * u - 1.0)
                    })
                    .collect();
                Array::from_vec(rows, cols, data)?
            }
        };
        self.params.insert(name, value)
    }
}

/// Fully connected layer over several named input pieces:
/// `sum_i in_i W_i + b`, summed in piece order.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub name: String,
    pub pieces: Vec<(String, usize, ParamId)>,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(b: &mut Builder<'_>, name: &str, pieces: &[(&str, usize)], out: usize) -> Result<Self> {
        Self::with_bias(b, name, pieces, out, Init::Zeros)
    }

    pub fn with_bias(
        b: &mut Builder<'_>,
        name: &str,
        pieces: &[(&str, usize)],
        out: usize,
        bias_init: Init,
    ) -> Result<Self> {
        let fan_in: usize = pieces.iter().map(|p| p.1).sum();
        let mut ps = Vec::with_capacity(pieces.len());
        for (piece, dim) in pieces {
            let id = b.param(
                &format!("{name}.{piece}"),
                *dim,
                out,
                Init::Glorot { fan_in, fan_out: out },
            )?;
            ps.push(((*piece).into(), *dim, id));
        }
        let bias = b.param(&format!("{name}.b"), 1, out, bias_init)?;
        Ok(Dense {
            name: name.into(),
            pieces: ps,
            bias,
        })
    }

    /// `inputs` must follow the piece order given at construction.
    pub fn apply(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.pieces.len() {
            return Err(Error::invalid(format!(
                "layer `{}` expects {} inputs, got {}",
                self.name,
                self.pieces.len(),
                inputs.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (&x, (_, _, w)) in inputs.iter().zip(&self.pieces) {
            let w = tape.param(*w);
            let term = tape.matmul(x, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        let bias = tape.param(self.bias);
        match acc {
            Some(a) => tape.add(a, bias),
            None => Ok(bias),
        }
    }

    pub fn dropout_site(&self) -> u32 {
        fnv1a(self.name.as_bytes()) as u32
    }
}

/// Applies the dropout mask of a layer in training mode; identity otherwise.
pub(crate) fn dropout(
    tape: &mut Tape<'_>,
    v: Var,
    site: u32,
    ctx: &mut LayerCtx<'_>,
) -> Result<Var> {
    if ctx.mode != Mode::Train || ctx.dropout_rate == 0.0 {
        return Ok(v);
    }
    let n = tape.value(v).cols();
    let keep = 1.0 - ctx.dropout_rate;
    let u = ctx.noise.uniforms(ctx.t, ctx.entity, NoiseRole::Dropout(site), n);
    let mask: Vec<f64> = u
        .data()
        .iter()
        .map(|&x| if x < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mask_mul(v, Array::row(&mask))
}

/// Per-call context for stochastic layers.
pub(crate) struct LayerCtx<'n> {
    pub noise: &'n mut dyn NoiseSource,
    pub mode: Mode,
    pub dropout_rate: f64,
    pub t: usize,
    pub entity: usize,
}

/// Hidden tanh layers (with dropout) followed by an output layer.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl Mlp {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        pieces: &[(&str, usize)],
        widths: &[usize],
        out: usize,
    ) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut prev: Vec<(&str, usize)> = pieces.to_vec();
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Dense::new(b, &format!("{name}.l{i}"), &prev, w)?);
            prev = alloc::vec![("in", w)];
        }
        let output = Dense::new(b, &format!("{name}.out"), &prev, out)?;
        Ok(Mlp { hidden, output })
    }

    /// Output of the last hidden layer (or the raw pieces concatenated through
    /// the output layer if there are none).
    pub fn trunk(&self, tape: &mut Tape<'_>, inputs: &[Var], ctx: &mut LayerCtx<'_>) -> Result<Vec<Var>> {
        let mut cur: Vec<Var> = inputs.to_vec();
        for layer in &self.hidden {
            let pre = layer.apply(tape, &cur)?;
            let act = tape.tanh(pre)?;
            let act = dropout(tape, act, layer.dropout_site(), ctx)?;
            cur = alloc::vec![act];
        }
        Ok(cur)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, inputs: &[Var], ctx: &mut LayerCtx<'_>) -> Result<Var> {
        let h = self.trunk(tape, inputs, ctx)?;
        self.output.apply(tape, &h)
    }
}

/// MLP trunk with separate mean and log-sigma output heads.
#[derive(Debug, Clone)]
pub(crate) struct GaussianNet {
    pub body: Mlp,
    pub log_sigma: Dense,
}

impl GaussianNet {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        pieces: &[(&str, usize)],
        widths: &[usize],
        out: usize,
    ) -> Result<Self> {
        let body = Mlp::new(b, &format!("{name}.mu"), pieces, widths, out)?;
        let last = widths.last().copied();
        let head_in: Vec<(&str, usize)> = match last {
            Some(w) => alloc::vec![("in", w)],
            None => pieces.to_vec(),
        };
        let log_sigma = Dense::new(b, &format!("{name}.log_sigma"), &head_in, out)?;
        Ok(GaussianNet { body, log_sigma })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        inputs: &[Var],
        ctx: &mut LayerCtx<'_>,
    ) -> Result<GaussianParams> {
        let h = self.body.trunk(tape, inputs, ctx)?;
        let mu = self.body.output.apply(tape, &h)?;
        let raw = self.log_sigma.apply(tape, &h)?;
        let log_sigma = bound_log_sigma(tape, raw)?;
        Ok(GaussianParams { mu, log_sigma })
    }
}

/// One gated recurrent (LSTM) layer. Gate order in the fused output is
/// input, forget, candidate, output.
#[derive(Debug, Clone)]
pub(crate) struct LstmLayer {
    pub gates: Dense,
    pub width: usize,
}

impl LstmLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, pieces: &[(&str, usize)], width: usize) -> Result<Self> {
        let mut all: Vec<(&str, usize)> = pieces.to_vec();
        all.push(("h", width));
        let gates = Dense::with_bias(
            b,
            name,
            &all,
            4 * width,
            Init::OnesOn {
                start: width,
                len: width,
            },
        )?;
        Ok(LstmLayer { gates, width })
    }

    /// Returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape<'_>, inputs: &[Var], h: Var, c: Var) -> Result<(Var, Var)> {
        let mut all = inputs.to_vec();
        all.push(h);
        let g = self.gates.apply(tape, &all)?;
        let w = self.width;
        let i_pre = tape.slice(g, 0, w)?;
        let f_pre = tape.slice(g, w, w)?;
        let g_pre = tape.slice(g, 2 * w, w)?;
        let o_pre = tape.slice(g, 3 * w, w)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let cand = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        let c_new = tape.add(keep, write)?;
        let squashed = tape.tanh(c_new)?;
        let h_new = tape.mul(o, squashed)?;
        Ok((h_new, c_new))
    }
}
