//! Parameter updates: plain SGD and Adam, both with optional linear warmup.

use super::{ParamStore, Result, Scalar, TensorError};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMethod {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub learning_rate: f64,
    /// Fraction of `total_steps` over which the rate ramps linearly from 0.
    pub warmup_proportion: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, warmup_proportion: f64, total_steps: usize) -> Self {
        OptimizerConfig {
            method: OptimizerMethod::Adam,
            learning_rate,
            warmup_proportion,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            method: OptimizerMethod::Sgd,
            learning_rate,
            warmup_proportion: 0.0,
            total_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Applies gradient updates to a [`ParamStore`]. Adam moments are kept per
/// parameter name; the step counter drives warmup and bias correction.
pub struct Optimizer<F: Scalar> {
    cfg: OptimizerConfig,
    step: usize,
    moments: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn effective_lr(&self, step: usize) -> f64 {
        let warmup_steps =
            (self.cfg.warmup_proportion * self.cfg.total_steps as f64).ceil() as usize;
        if warmup_steps > 0 && step <= warmup_steps {
            self.cfg.learning_rate * step as f64 / warmup_steps as f64
        } else {
            self.cfg.learning_rate
        }
    }

    /// One update over every parameter's accumulated gradient. Rejects the
    /// whole step if any gradient is non-finite, leaving parameters untouched.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        context: format!("gradient of `{name}`"),
                    });
                }
            }
        }
        self.step += 1;
        let lr = F::of(self.effective_lr(self.step));
        match self.cfg.method {
            OptimizerMethod::Sgd => {
                for (_, t) in params.iter_mut() {
                    let Some(g) = t.grad().map(<[F]>::to_vec) else {
                        continue;
                    };
                    for (w, gi) in t.data_mut().iter_mut().zip(&g) {
                        *w = *w - lr * *gi;
                    }
                }
            }
            OptimizerMethod::Adam => {
                let b1 = F::of(self.cfg.beta1);
                let b2 = F::of(self.cfg.beta2);
                let eps = F::of(self.cfg.eps);
                let bias1 = F::one() - F::of(self.cfg.beta1.powi(self.step as i32));
                let bias2 = F::one() - F::of(self.cfg.beta2.powi(self.step as i32));
                for (name, t) in params.iter_mut() {
                    let Some(g) = t.grad().map(<[F]>::to_vec) else {
                        continue;
                    };
                    let moments = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![F::zero(); g.len()],
                        v: vec![F::zero(); g.len()],
                    });
                    for ((w, gi), (m, v)) in t
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
                    {
                        *m = b1 * *m + (F::one() - b1) * *gi;
                        *v = b2 * *v + (F::one() - b2) * *gi * *gi;
                        let mhat = *m / bias1;
                        let vhat = *v / bias2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
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
    use crate::numerics::Tensor;

    fn store_with(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![1], vec![w]).unwrap());
        s.get_mut("w").unwrap().accumulate_grad(&[g]);
        s
    }

    #[test]
    fn sgd_basic_update() {
        let mut s = store_with(1.0, 2.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut s).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut s = store_with(1.5, 0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.5);
        let mut s = store_with(1.5, 0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 0.0, 10));
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn adam_first_step_matches_hand_moments() {
        let (w, g, lr) = (1.0, 2.0, 0.1);
        let mut s = store_with(w, g);
        let mut opt = Optimizer::new(OptimizerConfig::adam(lr, 0.0, 100));
        opt.step(&mut s).unwrap();
        // m = (1-β1)·g, v = (1-β2)·g², bias correction recovers m̂ = g, v̂ = g²
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let hand = w - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - hand).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_aborts_step() {
        let mut s = store_with(1.0, f64::NAN);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        let err = opt.step(&mut s).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert_eq!(s.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn warmup_scales_linearly() {
        let cfg = OptimizerConfig {
            method: OptimizerMethod::Sgd,
            learning_rate: 1.0,
            warmup_proportion: 0.5,
            total_steps: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let opt = Optimizer::<f64>::new(cfg);
        assert!((opt.effective_lr(1) - 0.2).abs() < 1e-15);
        assert!((opt.effective_lr(5) - 1.0).abs() < 1e-15);
        assert!((opt.effective_lr(6) - 1.0).abs() < 1e-15);
        assert!((opt.effective_lr(9) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_seeded_sequence_is_bit_identical() {
        let run = || {
            let mut s = store_with(1.0, 0.3);
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.01, 0.1, 20));
            for _ in 0..5 {
                opt.step(&mut s).unwrap();
            }
            s.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
