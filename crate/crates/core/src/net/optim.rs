//! SGD with momentum and per-parameter learning-rate multipliers.

use serde::{Deserialize, Serialize};

use super::tensor::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            learning_rate: 0.005,
            momentum: 0.9,
        }
    }
}

impl Sgd {
    /// `v = momentum * v + g; value -= lr * lr_mult * v`.
    pub fn step_param<T: Real>(&self, p: &mut Param<T>) {
        let mu = T::from_f64(self.momentum);
        let rate = T::from_f64(self.learning_rate * p.lr_mult);
        for ((v, g), x) in p.velocity.iter_mut().zip(&p.grad).zip(p.value.iter_mut()) {
            *v = mu * *v + *g;
            *x -= rate * *v;
        }
    }

    pub fn step<'a, T: Real>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        for p in params {
            self.step_param(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Param::new(vec![1.0f64, -2.0]);
        p.grad = vec![0.5, 0.25];
        Sgd { learning_rate: 0.1, momentum: 0.0 }.step_param(&mut p);
        assert_eq!(p.value, vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn two_momentum_steps_apply_2_9_g() {
        let mut p = Param::new(vec![1.0f64]);
        p.grad = vec![0.2];
        let opt = Sgd { learning_rate: 0.005, momentum: 0.9 };
        opt.step_param(&mut p);
        opt.step_param(&mut p);
        assert!((p.value[0] - (1.0 - 0.005 * 0.2 * 2.9)).abs() < 1e-15);
        assert!((p.velocity[0] - 1.9 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn head_multiplier_scales_update() {
        let mut head = Param::new(vec![0.0f64]);
        head.lr_mult = 10.0;
        let mut trunk = Param::new(vec![0.0f64]);
        head.grad = vec![0.3];
        trunk.grad = vec![0.3];
        Sgd::default().step([&mut head, &mut trunk]);
        assert!((head.value[0] - 10.0 * trunk.value[0]).abs() < 1e-15);
        assert!(trunk.value[0] < 0.0);
    }
}
