//! Adam with decoupled weight decay, wrapped in lookahead.

use ndarray::Array2;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone)]
pub struct AdamLookahead {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    k: usize,
    alpha: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    slow: Vec<Array2<f64>>,
}

impl AdamLookahead {
    pub fn new(params: &[Param], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.iter().map(|p| Array2::zeros(p.value.dim())).collect::<Vec<_>>();
        Ok(Self {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            k: cfg.lookahead_k,
            alpha: cfg.lookahead_alpha,
            step: 0,
            m: zeros(),
            v: zeros(),
            slow: params.iter().map(|p| p.value.clone()).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn slow_weights(&self) -> &[Array2<f64>] {
        &self.slow
    }

    /// One inner step. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Param], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.dim() != g.dim() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    left: p.value.dim(),
                    right: g.dim(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                });
        }

        if self.step % self.k as u64 == 0 {
            for (p, slow) in params.iter_mut().zip(&mut self.slow) {
                ndarray::Zip::from(&mut *slow)
                    .and(&p.value)
                    .for_each(|s, &f| *s += self.alpha * (f - *s));
                p.value.assign(slow);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one(v: f64) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            value: array![[v]],
        }]
    }

    fn cfg(lr: f64, wd: f64, k: usize, alpha: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            lookahead_k: k,
            lookahead_alpha: alpha,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_on_square() {
        let mut p = one(1.0);
        let mut opt = AdamLookahead::new(&p, &cfg(0.1, 0.0, 5, 0.5)).unwrap();
        opt.step(&mut p, &[array![[2.0]]]).unwrap();
        let expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8));
        assert!((p[0].value[[0, 0]] - expected).abs() < 1e-15);
        assert!((p[0].value[[0, 0]] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn full_alpha_sync_copies_fast_weights() {
        let mut p = one(1.0);
        let mut opt = AdamLookahead::new(&p, &cfg(0.05, 0.0, 3, 1.0)).unwrap();
        let mut fast_before_sync = 0.0;
        for i in 0..3 {
            let w = p[0].value[[0, 0]];
            if i == 2 {
                // value the inner step will produce on the sync step
                let mut probe = p.clone();
                let mut o = opt.clone();
                o.k = usize::MAX;
                o.step(&mut probe, &[array![[2.0 * w]]]).unwrap();
                fast_before_sync = probe[0].value[[0, 0]];
            }
            opt.step(&mut p, &[array![[2.0 * w]]]).unwrap();
        }
        assert_eq!(opt.slow_weights()[0][[0, 0]], fast_before_sync);
        assert_eq!(p[0].value[[0, 0]], fast_before_sync);
    }

    #[test]
    fn lookahead_interpolates() {
        let mut p = one(0.0);
        let mut opt = AdamLookahead::new(&p, &cfg(0.1, 0.0, 2, 0.5)).unwrap();
        opt.step(&mut p, &[array![[-1.0]]]).unwrap();
        let mut probe = p.clone();
        let mut o = opt.clone();
        o.k = usize::MAX;
        o.step(&mut probe, &[array![[-1.0]]]).unwrap();
        opt.step(&mut p, &[array![[-1.0]]]).unwrap();
        assert_eq!(p[0].value[[0, 0]], 0.5 * probe[0].value[[0, 0]]);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = vec![Param {
            name: "w".into(),
            value: array![[0.3, -1.7], [2.5, 0.0]],
        }];
        let before = p.clone();
        let mut opt = AdamLookahead::new(&p, &cfg(0.1, 0.0, 5, 0.5)).unwrap();
        for _ in 0..23 {
            opt.step(&mut p, &[Array2::zeros((2, 2))]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one(1.0);
        let mut opt = AdamLookahead::new(&p, &TrainConfig::default()).unwrap();
        match opt.step(&mut p, &[array![[f64::NAN]]]) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p[0].value[[0, 0]], 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
