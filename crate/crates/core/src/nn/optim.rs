use serde::{Deserialize, Serialize};

use super::param::{Param, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Learning rate under linear decay: `lr · (1 − frac)`, `frac` clamped to [0,1].
pub fn linear_decay(lr: f64, schedule_frac: f64) -> f64 {
    lr * (1.0 - schedule_frac.clamp(0.0, 1.0))
}

/// One AdamW update with decoupled weight decay on a single tensor.
pub fn adamw_update(p: &mut Param, lr: f64, cfg: &AdamWConfig) {
    p.step_count += 1;
    let t = p.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = lr * cfg.weight_decay;
    let value = p.value.data_mut();
    let grad = p.grad.data();
    let m = p.adam_m.data_mut();
    let v = p.adam_v.data_mut();
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        value[i] -= decay * value[i] + lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies AdamW to every trainable parameter of `model` at the decayed
/// learning rate.
pub fn adamw_step(model: &mut dyn Parameterized, lr: f64, schedule_frac: f64, cfg: &AdamWConfig) {
    let eff = linear_decay(lr, schedule_frac);
    model.visit_trainable_mut("", &mut |_, p| adamw_update(p, eff, cfg));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn scalar(v: f64) -> Param {
        Param::new(Matrix::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Param::new(Matrix::from_vec(1, 3, vec![0.5, -2.0, 3.25]).unwrap());
        let before = p.value.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut p, 1e-2, 0.3, &cfg);
        }
        assert_eq!(p.value, before);
        assert_eq!(p.step_count, 5);
    }

    #[test]
    fn fully_decayed_schedule_is_identity() {
        let mut p = scalar(0.7);
        p.grad.set(0, 0, 123.0);
        adamw_step(&mut p, 1.0, 1.0, &AdamWConfig::default());
        assert_eq!(p.value.get(0, 0), 0.7);
        adamw_step(&mut p, 1.0, 4.0, &AdamWConfig::default());
        assert_eq!(p.value.get(0, 0), 0.7);
    }

    #[test]
    fn single_step_closed_form() {
        // t=1: m̂ = g, v̂ = g², so θ₁ = θ₀ − lr·wd·θ₀ − lr·g/(|g| + eps).
        let cfg = AdamWConfig::default();
        let mut p = scalar(0.5);
        p.grad.set(0, 0, 1.0);
        adamw_step(&mut p, 1e-3, 0.0, &cfg);
        let expect = 0.5 - 1e-3 * 0.01 * 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.get(0, 0) - expect).abs() < 1e-12);
        assert!((p.value.get(0, 0) - 0.498_995_000_01).abs() < 1e-12);
        assert!((p.adam_m.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((p.adam_v.get(0, 0) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn schedule_scales_lr() {
        assert_eq!(linear_decay(2e-5, 0.0), 2e-5);
        assert!((linear_decay(2e-5, 0.25) - 1.5e-5).abs() < 1e-20);
        assert_eq!(linear_decay(2e-5, -1.0), 2e-5);
    }
}
