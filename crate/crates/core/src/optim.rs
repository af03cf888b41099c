//! AdamW and the cosine schedules for the learning rate and the EMA decay.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ScheduleConfig {
    pub eta_base: f64,
    pub n_total: u64,
    pub n_warmup: u64,
    pub tau_base: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { eta_base: 5e-4, n_total: 10_000, n_warmup: 1_000, tau_base: 0.99, weight_decay: 1e-5 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_warmup > self.n_total {
            return Err(Error::config("optim.n_warmup exceeds optim.n_total"));
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return Err(Error::config("optim.tau_base must lie in [0, 1]"));
        }
        if !(self.eta_base > 0.0) {
            return Err(Error::config("optim.eta_base must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Linear warmup to `eta_base`, then cosine annealing to zero at `n_total`.
/// Steps past `n_total` get zero.
pub fn learning_rate_at(i: u64, cfg: &ScheduleConfig) -> f64 {
    if i > cfg.n_total {
        return 0.0;
    }
    let (i, w, t) = (i as f64, cfg.n_warmup as f64, cfg.n_total as f64);
    if cfg.n_warmup > 0 && i <= w {
        return i * cfg.eta_base / w;
    }
    cfg.eta_base * (1.0 + libm::cos((i - w) * PI / (t - w))) * 0.5
}

/// EMA decay rising from `tau_base` at step 0 to 1 at `n_total` along a
/// half cosine.
pub fn tau_at(i: u64, cfg: &ScheduleConfig) -> f64 {
    if cfg.n_total == 0 {
        return 1.0;
    }
    let i = i.min(cfg.n_total) as f64;
    1.0 - (1.0 - cfg.tau_base) / 2.0 * (libm::cos(i * PI / cfg.n_total as f64) + 1.0)
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    moments: BTreeMap<String, (Matrix, Matrix)>,
    pub t: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<&(Matrix, Matrix)> {
        self.moments.get(name)
    }

    /// One decoupled-weight-decay Adam step over every trainable entry, then
    /// zeroes the gradients. A non-finite gradient aborts before anything is
    /// modified.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if p.kind.trainable() && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(BETA1, self.t as f64);
        let bc2 = 1.0 - libm::pow(BETA2, self.t as f64);
        for (name, p) in params.iter_mut() {
            if !p.kind.trainable() {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(p.value.rows(), p.value.cols()), Matrix::zeros(p.value.rows(), p.value.cols())));
            if p.kind.decays() && weight_decay != 0.0 {
                p.value.scale_in_place(1.0 - lr * weight_decay);
            }
            let values = p.value.as_mut_slice();
            let grads = p.grad.as_slice();
            for (((x, &g), m), v) in values.iter_mut().zip(grads).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use proptest::prelude::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig { eta_base: 0.01, n_total: 1000, n_warmup: 100, tau_base: 0.99, weight_decay: 1e-5 }
    }

    #[test]
    fn learning_rate_landmarks() {
        let c = cfg();
        assert_eq!(learning_rate_at(0, &c), 0.0);
        assert!((learning_rate_at(100, &c) - 0.01).abs() < 1e-15);
        assert!(learning_rate_at(1000, &c).abs() < 1e-15);
        assert!((learning_rate_at(550, &c) - 0.005).abs() < 1e-15);
        assert_eq!(learning_rate_at(1001, &c), 0.0);
        // No warmup: starts at the base rate.
        let nw = ScheduleConfig { n_warmup: 0, ..c };
        assert!((learning_rate_at(0, &nw) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn tau_landmarks() {
        let c = cfg();
        assert!((tau_at(0, &c) - 0.99).abs() < 1e-15);
        assert!((tau_at(1000, &c) - 1.0).abs() < 1e-15);
        assert!((tau_at(500, &c) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn validate_rejects_inverted_warmup() {
        assert!(ScheduleConfig { n_warmup: 5, n_total: 4, ..cfg() }.validate().is_err());
        assert!(ScheduleConfig { eta_base: 0.0, ..cfg() }.validate().is_err());
        cfg().validate().unwrap();
    }

    fn single(value: f64, kind: ParamKind) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Matrix::from_rows(&[&[value, -value]]), kind);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = single(1.5, ParamKind::Weight);
        let before = p.clone();
        AdamWState::new().step(&mut p, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = single(1.0, ParamKind::Weight);
        let g = Matrix::from_rows(&[&[0.3, -2.0]]);
        p.get_mut("x").unwrap().grad = g.clone();
        AdamWState::new().step(&mut p, 0.01, 0.0).unwrap();
        let x = p.value("x").unwrap();
        for (j, start) in [1.0, -1.0].iter().enumerate() {
            let gj = g[(0, j)];
            let expected = start - 0.01 * gj / (gj.abs() + ADAM_EPS);
            assert!((x[(0, j)] - expected).abs() < 1e-15);
        }
        assert_eq!(p.get("x").unwrap().grad, Matrix::zeros(1, 2));
    }

    #[test]
    fn decoupled_decay_scales_weights_only() {
        let mut p = single(2.0, ParamKind::Weight);
        p.insert("s", Matrix::scalar(2.0), ParamKind::NormScale);
        AdamWState::new().step(&mut p, 0.01, 1e-5).unwrap();
        assert_eq!(p.value("x").unwrap()[(0, 0)], 2.0 * (1.0 - 1e-7));
        assert_eq!(p.value("s").unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut p = single(1.0, ParamKind::Weight);
        p.get_mut("x").unwrap().grad = Matrix::from_rows(&[&[f64::NAN, 0.0]]);
        let before = p.clone();
        let mut opt = AdamWState::new();
        assert!(matches!(opt.step(&mut p, 0.1, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(p.value("x").unwrap(), before.value("x").unwrap());
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let target = [3.0, -1.0, 0.5];
        let mut p = ParamSet::new();
        p.insert("x", Matrix::zeros(1, 3), ParamKind::Weight);
        let mut opt = AdamWState::new();
        let sched = ScheduleConfig { eta_base: 0.05, n_total: 5000, n_warmup: 0, tau_base: 0.99, weight_decay: 0.0 };
        for i in 0..5000 {
            let x = p.value("x").unwrap().clone();
            let g = Matrix::from_fn(1, 3, |_, j| 2.0 * (x[(0, j)] - target[j]));
            p.get_mut("x").unwrap().grad = g;
            opt.step(&mut p, learning_rate_at(i, &sched), 0.0).unwrap();
        }
        let x = p.value("x").unwrap();
        for j in 0..3 {
            assert!((x[(0, j)] - target[j]).abs() < 1e-6, "{:?}", x);
        }
    }

    proptest! {
        #[test]
        fn tau_is_monotone(total in 1u64..5000, base in 0.0f64..=1.0) {
            let c = ScheduleConfig { n_total: total, n_warmup: 0, tau_base: base, ..cfg() };
            let mut prev = tau_at(0, &c);
            for i in 1..=total {
                let t = tau_at(i, &c);
                prop_assert!(t + 1e-15 >= prev);
                prev = t;
            }
            prop_assert!((prev - 1.0).abs() < 1e-12);
        }

        #[test]
        fn learning_rate_continuous_at_warmup(total in 2u64..100_000, frac in 0.0f64..1.0) {
            let w = ((total as f64) * frac) as u64;
            let c = ScheduleConfig { n_total: total, n_warmup: w, ..cfg() };
            prop_assert!((learning_rate_at(w, &c) - c.eta_base).abs() < 1e-15);
        }
    }
}
