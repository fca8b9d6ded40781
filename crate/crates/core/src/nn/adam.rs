use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;

use super::{NnError, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl Adam {
    /// One bias-corrected update at step `t ≥ 1` with learning rate `lr`.
    ///
    /// All gradients are validated first; on a non-finite gradient nothing is
    /// modified and the offending parameter is reported.
    pub fn step(
        &self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        t: u64,
    ) -> Result<(), NnError> {
        assert!(t >= 1, "Adam steps are 1-based");
        params.check_gradients(grads)?;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.name) else { continue };
            let w = p.tensor.data_mut();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Constant learning rate after a linear warmup over `warmup` steps.
pub fn warmup_lr(base: f64, warmup: u64, t: u64) -> f64 {
    if warmup == 0 || t >= warmup {
        base
    } else {
        base * t as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::nn::Init;

    fn grads_for(store: &ParamStore, value: f64) -> Gradients {
        // d/dw (value · Σw) = value everywhere.
        let mut g = Graph::new();
        let w = g.param("w");
        let s = g.sum(w);
        let out = g.scale(s, value);
        let e = crate::autodiff::evaluate(&g, store).unwrap();
        crate::autodiff::backward(&g, &e, out).unwrap()
    }

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.register("w", &[1], Init::Zeros);
        s.get_mut("w").unwrap().data_mut()[0] = v;
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(0.7);
        let opt = Adam {
            weight_decay: 0.0,
            ..Adam::default()
        };
        let g = grads_for(&s, 0.0);
        opt.step(&mut s, &g, 1e-3, 1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let mut s = store(0.5);
        let opt = Adam {
            weight_decay: 0.0,
            ..Adam::default()
        };
        let g = 0.3;
        let gr = grads_for(&s, g);
        opt.step(&mut s, &gr, 1e-2, 1).unwrap();
        // m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let expected = 0.5 - 1e-2 * g / (g.abs() + 1e-8);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_with_zero_gradient() {
        let mut s = store(2.0);
        let opt = Adam {
            weight_decay: 0.1,
            ..Adam::default()
        };
        let g = grads_for(&s, 0.0);
        opt.step(&mut s, &g, 1e-2, 1).unwrap();
        assert!((s.get("w").unwrap().item() - 2.0 * (1.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store(2.0);
        let mut bad = grads_for(&s, 1.0).into_map();
        bad.insert("w".into(), Tensor::vector(&[f64::INFINITY]));
        let bad = Gradients::from_map(bad);
        let err = Adam::default().step(&mut s, &bad, 1e-3, 1).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient("w".into()));
        assert_eq!(s.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_lr(1e-3, 10, 5), 5e-4);
        assert_eq!(warmup_lr(1e-3, 10, 20), 1e-3);
        assert_eq!(warmup_lr(1e-3, 0, 1), 1e-3);
    }
}
