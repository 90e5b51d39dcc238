//! Adam with bias correction and the exponential moving average of weights.

use crate::error::{CoreError, Result};
use crate::tensor::tape::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moments per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let first = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let second = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently stored on the params.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(CoreError::Contract(
                "optimizer state does not match parameter set".into(),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = p.grad.data();
            let val = p.value.data_mut();
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                val[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Shadow copy of the parameters updated as
/// `shadow <- decay * shadow + (1 - decay) * value`.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(CoreError::Config(format!(
                "ema decay must be in [0, 1), got {decay}"
            )));
        }
        Ok(Self {
            decay,
            shadow: params.iter().map(|(_, p)| p.value.clone()).collect(),
        })
    }

    pub fn update(&mut self, params: &ParamSet) {
        for ((_, p), s) in params.iter().zip(self.shadow.iter_mut()) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.value.data()) {
                *sv = self.decay * *sv + (1.0 - self.decay) * pv;
            }
        }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    /// Shadow tensor for the i-th parameter of the set it was built from.
    pub fn shadow_of(&self, index: usize) -> &Tensor {
        &self.shadow[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(v)).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps = one_param(1.5);
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.by_name("w").unwrap().value.item(), 1.5);
    }

    #[test]
    fn single_step_with_unit_gradient_moves_by_learning_rate() {
        // Bias correction makes m_hat = g and v_hat = g^2 on the first step,
        // so the update is -lr * g / (|g| + eps).
        let mut ps = one_param(0.0);
        ps.get_mut(ps.id_by_name("w").unwrap()).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps).unwrap();
        let delta = ps.by_name("w").unwrap().value.item();
        assert!((delta + 1e-4).abs() < 1e-9, "delta = {delta}");
    }

    #[test]
    fn ema_decay_zero_tracks_value() {
        let mut ps = one_param(2.0);
        let mut ema = Ema::new(&ps, 0.0).unwrap();
        ps.get_mut(ps.id_by_name("w").unwrap()).value = Tensor::scalar(7.0);
        ema.update(&ps);
        assert_eq!(ema.shadow_of(0).item(), 7.0);
    }

    #[test]
    fn ema_decay_out_of_range_rejected() {
        let ps = one_param(0.0);
        assert!(Ema::new(&ps, 1.0).is_err());
        assert!(Ema::new(&ps, -0.1).is_err());
    }
}
