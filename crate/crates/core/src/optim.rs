//! First-order optimizers with serializable state.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::{GradientSet, ParamSet};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer plus its moment estimates. SGD keeps no moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    steps: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamSet) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                return Err(Error::invalid("adam needs betas in [0, 1) and epsilon > 0"));
            }
        }
        let zeros = || params.values().iter().map(|a| Array::zeros(a.rows(), a.cols())).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Optimizer {
            kind,
            learning_rate,
            steps: 0,
            m,
            v,
        })
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(
        kind: OptimizerKind,
        learning_rate: f64,
        steps: u64,
        m: Vec<Array>,
        v: Vec<Array>,
        params: &ParamSet,
    ) -> Result<Self> {
        let mut opt = Self::new(kind, learning_rate, params)?;
        if matches!(kind, OptimizerKind::Adam { .. }) {
            let fits = |s: &[Array]| {
                s.len() == params.len() && s.iter().zip(params.values()).all(|(a, p)| a.shape() == p.shape())
            };
            if !fits(&m) || !fits(&v) {
                return Err(Error::invalid("optimizer moments do not match the parameters"));
            }
            opt.m = m;
            opt.v = v;
        }
        opt.steps = steps;
        Ok(opt)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Array] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array] {
        &self.v
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &GradientSet) -> Result<()> {
        if grads.names() != params.names() {
            return Err(Error::invalid("gradient keys do not match the parameters"));
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grads.values()) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let n = self.steps as i32;
                let c1 = 1.0 - math::powi(beta1, n);
                let c2 = 1.0 - math::powi(beta2, n);
                for (((p, g), m), v) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grads.values())
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((w, &d), mi), vi) in it {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *w -= lr * mh / (math::sqrt(vh) + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{clip_gradients, Tape};
    use proptest::prelude::*;

    fn quadratic() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Array::row(&[3.0, -2.0])).unwrap();
        p
    }

    fn grad(p: &ParamSet) -> GradientSet {
        let mut t = Tape::new(p);
        let w = t.param_named("w").unwrap();
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap()
    }

    #[test]
    fn sgd_step_is_lr_times_gradient() {
        let mut p = quadratic();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &p).unwrap();
        let g = grad(&p);
        opt.update(&mut p, &g).unwrap();
        assert_eq!(p.by_name("w").unwrap().data(), &[3.0 - 0.6, -2.0 + 0.4]);
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_lr() {
        let mut p = quadratic();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &p).unwrap();
        let g = grad(&p);
        opt.update(&mut p, &g).unwrap();
        let w = p.by_name("w").unwrap().data();
        assert!((w[0] - 2.99).abs() < 1e-9 && (w[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = quadratic();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.05, &p).unwrap();
        for _ in 0..2000 {
            let g = grad(&p);
            opt.update(&mut p, &g).unwrap();
        }
        assert!(p.by_name("w").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn invalid_settings_rejected() {
        let p = quadratic();
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, &p).is_err());
        let bad = OptimizerKind::Adam {
            beta1: 1.0,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        assert!(Optimizer::new(bad, 0.1, &p).is_err());
    }

    proptest! {
        #[test]
        fn clipped_updates_stay_bounded(gs in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 1..30)) {
            let lr = 1e-3;
            let clip = 5.0;
            let mut sgd_p = quadratic();
            let mut adam_p = quadratic();
            let mut sgd = Optimizer::new(OptimizerKind::Sgd, lr, &sgd_p).unwrap();
            let mut adam = Optimizer::new(OptimizerKind::default(), lr, &adam_p).unwrap();
            let template = sgd_p.zero_gradients();
            for g in gs {
                let mut raw = template.clone();
                raw.values_mut()[0] = Array::row(&g);
                let clipped = clip_gradients(raw, clip).unwrap();
                for (opt, p, bound) in [(&mut sgd, &mut sgd_p, lr * clip), (&mut adam, &mut adam_p, lr * 0.1 / (0.001f64).sqrt())] {
                    let before = p.values()[0].clone();
                    opt.update(p, &clipped).unwrap();
                    for (a, b) in before.data().iter().zip(p.values()[0].data()) {
                        prop_assert!((a - b).abs() <= bound * (1.0 + 1e-9));
                    }
                }
            }
        }
    }
}
