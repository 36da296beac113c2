use serde::{Deserialize, Serialize};

use super::mlp::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with decoupled weight decay. Moments are allocated lazily from the
/// first parameter set passed to [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        let grad_views = grads.param_views();
        for (name, g) in &grad_views {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let param_views = params.param_views_mut();
        if param_views.len() != grad_views.len() {
            return Err(Error::Dimension {
                expected: param_views.len(),
                got: grad_views.len(),
            });
        }
        for (p, (_, g)) in param_views.iter().zip(&grad_views) {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    expected: p.len(),
                    got: g.len(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = grad_views.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grad_views.len()
            || self
                .m
                .iter()
                .zip(&grad_views)
                .any(|(m, (_, g))| m.len() != g.len())
        {
            return Err(Error::Validation(
                "parameter shapes changed between steps".into(),
            ));
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (((p, (_, g)), m), v) in param_views
            .into_iter()
            .zip(&grad_views)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn param_views(&self) -> Vec<(String, &[f64])> {
            vec![("x".into(), &self.0)]
        }
        fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = Scalar(vec![1.5, -2.0]);
        let g = Scalar(vec![0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.0, vec![1.5, -2.0]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Scalar(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.01));
        opt.step(&mut p, &Scalar(vec![1.0])).unwrap();
        // m_hat = 1, v_hat = 1: delta = lr / (1 + eps)
        assert!((p.0[0] - (1.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = Scalar(vec![2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::with_lr(0.01)
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut p, &Scalar(vec![0.0])).unwrap();
        assert_eq!(p.0[0], 2.0 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = Scalar(vec![0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        match opt.step(&mut p, &Scalar(vec![f64::NAN])) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Scalar(vec![0.0, 1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut p, &Scalar(vec![1.0])).is_err());
    }
}
