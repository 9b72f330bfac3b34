use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Adam with bias correction. A parameter without a gradient in a step is
/// left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, lr: f64) -> Result<Self> {
        cfg.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            cfg,
            lr,
            state: BTreeMap::new(),
        })
    }

    /// Apply one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore) -> Result<usize> {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let mut updated = 0;
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: g.zeros_like().expect("zeros"),
                v: g.zeros_like().expect("zeros"),
                steps: 0,
            });
            entry.steps += 1;
            entry.m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let bc1 = 1.0 - beta1.powi(entry.steps as i32);
            let bc2 = 1.0 - beta2.powi(entry.steps as i32);
            let denom = ((&entry.v / bc2)?.sqrt()? + eps)?;
            let delta = ((&entry.m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (delta * self.lr)?)?)?;
            updated += 1;
        }
        Ok(updated)
    }

    pub fn steps_of(&self, name: &str) -> u64 {
        self.state.get(name).map(|s| s.steps).unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = HashMap::new();
        for (name, s) in &self.state {
            tensors.insert(format!("m.{name}"), s.m.clone());
            tensors.insert(format!("v.{name}"), s.v.clone());
            tensors.insert(
                format!("steps.{name}"),
                Tensor::new(&[s.steps as f64], &Device::Cpu)?,
            );
        }
        candle_core::safetensors::save(&tensors, path).map_err(|e| Error::format(path, e))
    }

    pub fn load(&mut self, path: &Path, device: &Device) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, device).map_err(|e| Error::format(path, e))?;
        let mut state = BTreeMap::new();
        for (key, m) in &tensors {
            let Some(name) = key.strip_prefix("m.") else {
                continue;
            };
            let missing = || Error::format(path, format!("incomplete optimizer state for `{name}`"));
            let v = tensors.get(&format!("v.{name}")).ok_or_else(missing)?;
            let steps = tensors.get(&format!("steps.{name}")).ok_or_else(missing)?;
            let steps = steps.to_vec1::<f64>()?[0] as u64;
            state.insert(
                name.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                    steps,
                },
            );
        }
        self.state = state;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn matches_hand_computed_update() {
        // Minimise (p - 3)^2 from p = 0; the first Adam step moves by lr.
        let p = Var::from_tensor(&Tensor::new(&[0.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), p.clone());
        let mut opt = Adam::new(AdamConfig::default(), 0.1).unwrap();
        let loss = (p.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.step(&params, &loss.backward().unwrap()).unwrap();
        let v = p.as_tensor().to_vec1::<f64>().unwrap()[0];
        // g = -6, m_hat = -6, v_hat = 36, delta = -6 / (6 + 1e-8).
        let expected = 0.1 * 6.0 / (6.0 + 1e-8);
        assert!((v - expected).abs() < 1e-15);

        // Second step by an oracle recurrence.
        let g2 = 2.0 * (v - 3.0);
        let m = 0.9 * 0.1 * -6.0 + 0.1 * g2;
        let vv = 0.999 * 0.001 * 36.0 + 0.001 * g2 * g2;
        let step = (m / (1.0 - 0.81)) / ((vv / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let loss = (p.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.step(&params, &loss.backward().unwrap()).unwrap();
        let v2 = p.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v2 - (v - 0.1 * step)).abs() < 1e-12);
    }

    #[test]
    fn untouched_without_gradient_and_state_round_trips() {
        let a = Var::ones(2, DType::F32, &Device::Cpu).unwrap();
        let b = Var::ones(2, DType::F32, &Device::Cpu).unwrap();
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), a.clone());
        params.insert("b".to_string(), b.clone());
        let mut opt = Adam::new(AdamConfig::default(), 0.01).unwrap();
        let loss = a.as_tensor().sum_all().unwrap();
        assert_eq!(opt.step(&params, &loss.backward().unwrap()).unwrap(), 1);
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
        assert_eq!((opt.steps_of("a"), opt.steps_of("b")), (1, 0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("optim.safetensors");
        opt.save(&path).unwrap();
        let mut back = Adam::new(AdamConfig::default(), 0.01).unwrap();
        back.load(&path, &Device::Cpu).unwrap();
        assert_eq!(back.steps_of("a"), 1);
        let m0: Vec<f32> = opt.state["a"].m.to_vec1().unwrap();
        let m1: Vec<f32> = back.state["a"].m.to_vec1().unwrap();
        assert_eq!(m0, m1);
    }
}
