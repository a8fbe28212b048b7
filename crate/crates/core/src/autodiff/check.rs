use super::params::{GradientSet, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared by absolute error.
const ABS_FLOOR: f64 = 1e-3;

/// Worst disagreement between [`Tape::backward`] and central finite
/// differences over every parameter element.
///
/// `build` must construct the scalar on the given tape deterministically; it
/// is re-run for every perturbed parameter copy. The error per element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(params: &ParamSet, epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let out = build(&mut tape)?;
        tape.backward(out)?
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(p);
        let out = build(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.values().iter().enumerate() {
        for e in 0..grad.len() {
            let orig = probe.values()[pi].data()[e];
            probe.values_mut()[pi].data_mut()[e] = orig + epsilon;
            let up = eval(&probe)?;
            probe.values_mut()[pi].data_mut()[e] = orig - epsilon;
            let down = eval(&probe)?;
            probe.values_mut()[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.data()[e];
            let scale = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// Element-wise clamp of every gradient to `[-threshold, threshold]`.
pub fn clip_gradients(mut grads: GradientSet, threshold: f64) -> Result<GradientSet> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("clip threshold must be positive"));
    }
    for v in grads.values_mut() {
        for x in v.data_mut() {
            *x = x.clamp(-threshold, threshold);
        }
    }
    Ok(grads)
}
