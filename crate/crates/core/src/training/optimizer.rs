//! Adam with bias correction. State is kept per parameter name; frozen
//! parameters are skipped entirely, leaving both the weights and their
//! optimizer state untouched.

use indexmap::IndexMap;
use ndarray::Array2;

use super::{TrainConfig, TrainableMask};
use crate::model::{Gradients, ModelParameters};

#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first_moment: IndexMap<String, Array2<f64>>,
    second_moment: IndexMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the trainable parameters.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &Gradients, mask: &TrainableMask) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, value) in params.iter_mut() {
            if !mask.is_trainable(name) {
                continue;
            }
            let g = grads.get(name);
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(value.dim()));
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(value.dim()));
            for (((w, m), v), &g) in value
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.iter())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DurationPredictorVariant, ModelConfig};
    use crate::training::FreezeConfig;

    fn setup() -> (ModelParameters, Gradients, TrainConfig) {
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        for (_, g) in grads.iter_mut() {
            g.fill(0.125);
        }
        (params, grads, TrainConfig::default())
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mut params, grads, mut cfg) = setup();
        cfg.learning_rate = 0.0;
        let before = params.clone();
        let mut adam = Adam::new(&cfg);
        adam.step(&mut params, &grads, &TrainableMask::all_trainable());
        assert_eq!(params, before);
    }

    #[test]
    fn frozen_groups_are_bit_identical_after_steps() {
        let (mut params, grads, mut cfg) = setup();
        cfg.learning_rate = 0.01;
        let before = params.clone();
        let mask = crate::training::apply_freeze(FreezeConfig::ft1());
        let mut adam = Adam::new(&cfg);
        for _ in 0..10 {
            adam.step(&mut params, &grads, &mask);
        }
        for (name, arr) in params.iter() {
            if name.starts_with("encoder.") || name.starts_with("decoder.") {
                assert_eq!(arr, before.get(name), "{name} must stay frozen");
            } else {
                assert_ne!(arr, before.get(name), "{name} must move");
            }
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate_under_constant_gradient() {
        // With bias correction, the first Adam step is lr * g / (|g| + eps).
        let (mut params, grads, mut cfg) = setup();
        cfg.learning_rate = 0.05;
        let before = params.get("decoder.mel_head.w").clone();
        let mut adam = Adam::new(&cfg);
        adam.step(&mut params, &grads, &TrainableMask::all_trainable());
        let after = params.get("decoder.mel_head.w");
        let expected = 0.05 * 0.125 / (0.125 + cfg.epsilon);
        for (b, a) in before.iter().zip(after.iter()) {
            assert!((b - a - expected).abs() < 1e-12);
        }
    }
}
