//! Adam with coupled L2 weight decay on non-bias parameters.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for parameters under `backbone.`.
    pub backbone_lr_mult: f64,
    /// Skip updates to `backbone.` parameters entirely.
    pub freeze_backbone: bool,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            backbone_lr_mult: 1.0,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    pub fn restore(config: AdamConfig, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) -> Self {
        Self { config, step, moments }
    }

    /// One update of every trainable parameter. A parameter absent from `grads`
    /// is treated as having zero loss gradient, so weight decay still applies.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.trainable() {
            let in_backbone = name.starts_with("backbone.");
            if in_backbone && c.freeze_backbone {
                continue;
            }
            let w = p.var.as_tensor();
            let mut g = match grads.get(w) {
                Some(g) => g.detach(),
                None => w.zeros_like()?,
            };
            if c.weight_decay != 0.0 && p.kind != ParamKind::Bias {
                g = (g + (w.detach() * c.weight_decay)?)?;
            }
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (w.zeros_like()?, w.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let lr = if in_backbone { c.learning_rate * c.backbone_lr_mult } else { c.learning_rate };
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            p.var.set(&(w.detach() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamKind};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = s.builder(&mut rng).param("w", &[3], Init::Const(1.0), ParamKind::Weight).unwrap();
        let loss = (&w * 2.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0));
        opt.step(&s, &grads).unwrap();
        for v in s.tensors()["w"].to_vec1::<f64>().unwrap() {
            assert!((v - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_decay_skips_biases_and_acts_without_gradient() {
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = s.builder(&mut rng);
        let w = b.param("w", &[1], Init::Const(1.0), ParamKind::Weight).unwrap();
        b.param("b", &[1], Init::Const(1.0), ParamKind::Bias).unwrap();
        let grads = (&w * 0.0).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.01, 1e-2));
        opt.step(&s, &grads).unwrap();
        let t = s.tensors();
        assert!(t["w"].to_vec1::<f64>().unwrap()[0] < 1.0);
        assert_eq!(t["b"].to_vec1::<f64>().unwrap()[0], 1.0);
    }

    #[test]
    fn frozen_backbone_is_untouched() {
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = s.builder(&mut rng).pp("backbone").param("w", &[2], Init::Const(1.0), ParamKind::Weight).unwrap();
        let grads = w.sum_all().unwrap().backward().unwrap();
        let mut cfg = AdamConfig::new(0.1, 0.0);
        cfg.freeze_backbone = true;
        Adam::new(cfg).step(&s, &grads).unwrap();
        assert_eq!(s.tensors()["backbone.w"].to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }
}
