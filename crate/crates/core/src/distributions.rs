//! Diagonal Gaussian, categorical and Gumbel-Softmax primitives, all built
//! from tape operations so they differentiate end to end.

use alloc::format;

use crate::array::Array;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;

/// Log standard deviations are squashed into `(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)`,
/// i.e. log-variance into (-7, 7).
pub const LOG_SIGMA_BOUND: f64 = 3.5;

/// Gumbel-Softmax temperature used unless a spec overrides it.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct GaussianParams {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussianParams {
    pub fn new(tape: &Tape<'_>, mu: Var, log_sigma: Var) -> Result<Self> {
        if tape.value(mu).shape() != tape.value(log_sigma).shape() {
            return Err(Error::invalid("mu and log_sigma shapes differ"));
        }
        Ok(GaussianParams { mu, log_sigma })
    }

    pub fn dim(&self, tape: &Tape<'_>) -> usize {
        tape.value(self.mu).cols()
    }
}

/// Categorical distribution parameterized by unnormalized logits.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalParams {
    pub logits: Var,
}

impl CategoricalParams {
    pub fn new(logits: Var) -> Self {
        CategoricalParams { logits }
    }

    /// Builds logits as `log(p)` from explicit probabilities.
    pub fn from_probs(tape: &mut Tape<'_>, probs: &[f64]) -> Result<Self> {
        let logits: alloc::vec::Vec<f64> = probs.iter().map(|&p| math::ln(p)).collect();
        Ok(CategoricalParams {
            logits: tape.checked_input(Array::row(&logits))?,
        })
    }

    pub fn n_class(&self, tape: &Tape<'_>) -> usize {
        tape.value(self.logits).cols()
    }

    pub fn probs(&self, tape: &mut Tape<'_>) -> Result<Var> {
        tape.softmax(self.logits)
    }

    pub fn log_probs(&self, tape: &mut Tape<'_>) -> Result<Var> {
        tape.log_softmax(self.logits)
    }

    /// Probabilities as plain values.
    pub fn prob_values(&self, tape: &Tape<'_>) -> alloc::vec::Vec<f64> {
        let l = tape.value(self.logits).data();
        let lse = math::log_sum_exp(l);
        l.iter().map(|&v| math::exp(v - lse)).collect()
    }
}

/// A relaxed one-hot vector on the probability simplex.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedSample {
    pub vector: Var,
    pub temperature: f64,
}

fn same_shape(tape: &Tape<'_>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Closed-form `KL(q || p)` between diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(tape: &mut Tape<'_>, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    same_shape(tape, q.mu, p.mu, "gaussian_kl")?;
    let dlog = tape.sub(q.log_sigma, p.log_sigma)?;
    let two_dlog = tape.scale(dlog, 2.0)?;
    let var_ratio = tape.exp(two_dlog)?;
    let dmu = tape.sub(q.mu, p.mu)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let neg2 = tape.scale(p.log_sigma, -2.0)?;
    let inv_var_p = tape.exp(neg2)?;
    let maha = tape.mul(dmu2, inv_var_p)?;
    let s = tape.add(var_ratio, maha)?;
    let half = tape.scale(s, 0.5)?;
    let per_dim = tape.sub(half, dlog)?;
    let per_dim = tape.offset(per_dim, -0.5)?;
    tape.sum(per_dim)
}

/// `mu + exp(log_sigma) * noise`.
pub fn reparam_sample(tape: &mut Tape<'_>, params: &GaussianParams, noise: &Array) -> Result<Var> {
    if tape.value(params.mu).shape() != noise.shape() {
        return Err(Error::invalid(format!(
            "reparam_sample: noise shape {:?} does not match {:?}",
            noise.shape(),
            tape.value(params.mu).shape()
        )));
    }
    let sigma = tape.exp(params.log_sigma)?;
    let eps = tape.input(noise.clone());
    let scaled = tape.mul(sigma, eps)?;
    tape.add(params.mu, scaled)
}

/// Diagonal Gaussian log density of `x`, summed over dimensions.
pub fn gaussian_log_pdf(tape: &mut Tape<'_>, x: Var, params: &GaussianParams) -> Result<Var> {
    same_shape(tape, x, params.mu, "gaussian_log_pdf")?;
    let diff = tape.sub(x, params.mu)?;
    let sq = tape.mul(diff, diff)?;
    let neg2 = tape.scale(params.log_sigma, -2.0)?;
    let inv_var = tape.exp(neg2)?;
    let maha = tape.mul(sq, inv_var)?;
    let two_ls = tape.scale(params.log_sigma, 2.0)?;
    let inner = tape.add(maha, two_ls)?;
    let inner = tape.offset(inner, math::LN_2PI)?;
    let s = tape.sum(inner)?;
    tape.scale(s, -0.5)
}

/// `sum_i q_i (log q_i - log p_i)`.
pub fn categorical_kl(
    tape: &mut Tape<'_>,
    q: &CategoricalParams,
    p: &CategoricalParams,
) -> Result<Var> {
    if q.n_class(tape) != p.n_class(tape) {
        return Err(Error::invalid("categorical_kl: class counts differ"));
    }
    let lq = q.log_probs(tape)?;
    let lp = p.log_probs(tape)?;
    let pq = tape.exp(lq)?;
    let d = tape.sub(lq, lp)?;
    let w = tape.mul(pq, d)?;
    tape.sum(w)
}

/// `softmax((logits + g) / temperature)` with `g = -log(-log(u))`.
pub fn gumbel_softmax_sample(
    tape: &mut Tape<'_>,
    logits: Var,
    temperature: f64,
    uniform_noise: &Array,
) -> Result<RelaxedSample> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if uniform_noise.shape() != tape.value(logits).shape() {
        return Err(Error::invalid("gumbel noise shape does not match logits"));
    }
    if uniform_noise.data().iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::invalid("gumbel noise must lie in (0, 1)"));
    }
    let g: alloc::vec::Vec<f64> = uniform_noise
        .data()
        .iter()
        .map(|&u| -math::ln(-math::ln(u)))
        .collect();
    let g = tape.input(Array::row(&g));
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature)?;
    let vector = tape.softmax(scaled)?;
    Ok(RelaxedSample {
        vector,
        temperature,
    })
}

/// Validates a one-hot target row and returns its hot index.
pub fn one_hot_index(target: &Array) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in target.data().iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::invalid("target is not one-hot"));
        }
    }
    if target.rows() != 1 {
        return Err(Error::invalid("target is not a single row"));
    }
    hot.ok_or_else(|| Error::invalid("target is not one-hot"))
}

/// `-log(prob of the target class)`.
pub fn label_cross_entropy(
    tape: &mut Tape<'_>,
    target: &Array,
    params: &CategoricalParams,
) -> Result<Var> {
    one_hot_index(target)?;
    if target.cols() != params.n_class(tape) {
        return Err(Error::invalid("label_cross_entropy: class counts differ"));
    }
    let lp = params.log_probs(tape)?;
    let t = tape.input(target.clone());
    let picked = tape.mul(lp, t)?;
    let s = tape.sum(picked)?;
    tape.neg(s)
}

/// `-log p(y)` under a uniform prior over `n_class` outcomes.
pub fn uniform_label_cost(n_class: usize) -> f64 {
    math::ln(n_class as f64)
}

/// Maps an unconstrained value into `(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)`.
pub fn bound_log_sigma(tape: &mut Tape<'_>, raw: Var) -> Result<Var> {
    let s = tape.scale(raw, 1.0 / LOG_SIGMA_BOUND)?;
    let t = tape.tanh(s)?;
    tape.scale(t, LOG_SIGMA_BOUND)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamSet;

    fn gauss(t: &mut Tape<'_>, mu: &[f64], ls: &[f64]) -> GaussianParams {
        let m = t.input(Array::row(mu));
        let l = t.input(Array::row(ls));
        GaussianParams::new(t, m, l).unwrap()
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let q = gauss(&mut t, &[0.0, 0.0], &[0.0, 0.0]);
        let r = gauss(&mut t, &[0.0, 0.0], &[0.0, 0.0]);
        let kl = gaussian_kl(&mut t, &q, &r).unwrap();
        assert_eq!(t.scalar(kl), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let q = gauss(&mut t, &[1.0], &[0.0]);
        let r = gauss(&mut t, &[0.0], &[0.0]);
        let kl = gaussian_kl(&mut t, &q, &r).unwrap();
        assert!((t.scalar(kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let q = gauss(&mut t, &[1.0], &[0.0]);
        let r = gauss(&mut t, &[0.0, 0.0], &[0.0, 0.0]);
        assert!(gaussian_kl(&mut t, &q, &r).is_err());
    }

    #[test]
    fn reparam_with_zero_noise_returns_mean() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let g = gauss(&mut t, &[0.3, -1.2], &[0.5, -0.5]);
        let z = reparam_sample(&mut t, &g, &Array::zeros(1, 2)).unwrap();
        assert_eq!(t.value(z).data(), &[0.3, -1.2]);
        let g = gauss(&mut t, &[0.0], &[0.0]);
        let z = reparam_sample(&mut t, &g, &Array::row(&[1.5])).unwrap();
        assert_eq!(t.value(z).data(), &[1.5]);
        assert!(reparam_sample(&mut t, &g, &Array::zeros(1, 3)).is_err());
    }

    #[test]
    fn log_pdf_of_standard_normal_at_origin() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let g = gauss(&mut t, &[0.0], &[0.0]);
        let x = t.input(Array::row(&[0.0]));
        let lp = gaussian_log_pdf(&mut t, x, &g).unwrap();
        assert!((t.scalar(lp) + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_peaks_at_mean_and_scales_with_sigma() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let g = gauss(&mut t, &[0.4, -0.2], &[0.1, 0.3]);
        let at_mu = t.input(Array::row(&[0.4, -0.2]));
        let off = t.input(Array::row(&[0.45, -0.2]));
        let a = gaussian_log_pdf(&mut t, at_mu, &g).unwrap();
        let b = gaussian_log_pdf(&mut t, off, &g).unwrap();
        assert!(t.scalar(a) > t.scalar(b));
        let ln2 = core::f64::consts::LN_2;
        let wide = gauss(&mut t, &[0.4, -0.2], &[0.1 + ln2, 0.3 + ln2]);
        let c = gaussian_log_pdf(&mut t, at_mu, &wide).unwrap();
        assert!((t.scalar(a) - t.scalar(c) - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn categorical_kl_values() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let u = CategoricalParams::from_probs(&mut t, &[0.25; 4]).unwrap();
        let u2 = CategoricalParams::from_probs(&mut t, &[0.25; 4]).unwrap();
        let kl = categorical_kl(&mut t, &u, &u2).unwrap();
        assert!(t.scalar(kl).abs() < 1e-15);

        let q = CategoricalParams::from_probs(&mut t, &[1.0 - 1e-12, 1e-12]).unwrap();
        let h = CategoricalParams::from_probs(&mut t, &[0.5, 0.5]).unwrap();
        let kl = categorical_kl(&mut t, &q, &h).unwrap();
        assert!((t.scalar(kl) - core::f64::consts::LN_2).abs() < 1e-6);

        // Direct summation: 0.25 * sum(ln 0.25 - ln p_i).
        let skew = CategoricalParams::from_probs(&mut t, &[0.7, 0.1, 0.1, 0.1]).unwrap();
        let kl = categorical_kl(&mut t, &u, &skew).unwrap();
        let expected: f64 = [0.7f64, 0.1, 0.1, 0.1]
            .iter()
            .map(|p| 0.25 * (0.25f64.ln() - p.ln()))
            .sum();
        assert!((t.scalar(kl) - expected).abs() < 1e-12, "{}", t.scalar(kl));
        assert!((expected - 0.429_813_194_610_326_6).abs() < 1e-12);
        assert!(categorical_kl(&mut t, &u, &h).is_err());
    }

    #[test]
    fn gumbel_symmetric_noise_gives_uniform() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let l = t.input(Array::row(&[0.3, 0.3, 0.3]));
        let s = gumbel_softmax_sample(&mut t, l, 0.1, &Array::row(&[0.4, 0.4, 0.4])).unwrap();
        for v in t.value(s.vector).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_rejects_bad_arguments() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let l = t.input(Array::row(&[0.0, 0.0]));
        let u = Array::row(&[0.5, 0.5]);
        assert!(gumbel_softmax_sample(&mut t, l, 0.0, &u).is_err());
        assert!(gumbel_softmax_sample(&mut t, l, -1.0, &u).is_err());
        assert!(gumbel_softmax_sample(&mut t, l, 0.1, &Array::row(&[0.0, 0.5])).is_err());
        assert!(gumbel_softmax_sample(&mut t, l, 0.1, &Array::row(&[1.0, 0.5])).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let u = CategoricalParams::from_probs(&mut t, &[0.25; 4]).unwrap();
        let ce = label_cross_entropy(&mut t, &Array::one_hot(4, 2), &u).unwrap();
        assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-12);
        let half = CategoricalParams::from_probs(&mut t, &[0.5, 0.5]).unwrap();
        let ce = label_cross_entropy(&mut t, &Array::one_hot(2, 0), &half).unwrap();
        assert!((t.scalar(ce) - 2f64.ln()).abs() < 1e-12);
        let sure = CategoricalParams::from_probs(&mut t, &[1.0 - 1e-12, 1e-12]).unwrap();
        let ce = label_cross_entropy(&mut t, &Array::one_hot(2, 0), &sure).unwrap();
        assert!(t.scalar(ce).abs() < 1e-9);
        assert!(label_cross_entropy(&mut t, &Array::row(&[0.5, 0.5]), &half).is_err());
        assert!(label_cross_entropy(&mut t, &Array::row(&[1.0, 1.0]), &half).is_err());
    }

    #[test]
    fn bounded_log_sigma_stays_in_range() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let raw = t.input(Array::row(&[-100.0, 0.0, 100.0]));
        let b = bound_log_sigma(&mut t, raw).unwrap();
        let d = t.value(b).data();
        assert!(d[0] >= -LOG_SIGMA_BOUND && d[2] <= LOG_SIGMA_BOUND);
        assert_eq!(d[1], 0.0);
    }
}
