//! AdamW with linear warmup and checkpointable moment buffers.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length in steps; the rate ramps linearly from
    /// `warmup_factor · lr` to `lr`.
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            warmup_factor: 0.001,
            grad_clip: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            return self.lr;
        }
        let t = step as f64 / self.warmup_steps as f64;
        self.lr * (self.warmup_factor + (1.0 - self.warmup_factor) * t)
    }
}

pub struct AdamW {
    pub cfg: OptimizerConfig,
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    no_decay: Vec<String>,
    /// Completed update count.
    pub step: usize,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: OptimizerConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(AdamW {
            cfg,
            params,
            m,
            v,
            no_decay: Vec::new(),
            step: 0,
        })
    }

    /// Skip weight decay for parameters under `prefix`.
    pub fn exclude_decay(&mut self, prefix: &str) {
        self.no_decay.push(prefix.to_string());
    }

    fn decays(&self, name: &str) -> bool {
        !self
            .no_decay
            .iter()
            .any(|p| name == p || name.starts_with(&format!("{p}.")))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    /// Global L2 norm of the gradients of the managed parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut s = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                s += g
                    .to_dtype(candle_core::DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(s.sqrt())
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let scale = if self.cfg.grad_clip > 0.0 {
            let n = self.grad_norm(grads)?;
            if n > self.cfg.grad_clip {
                self.cfg.grad_clip / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let params = self.params.clone();
        for (name, var) in &params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            let m = ((&self.m[name] * b1)? + (&g * (1.0 - b1))?)?.detach();
            let v = ((&self.v[name] * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            let wd = if self.decays(name) {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let decayed = (var.as_tensor() * (1.0 - lr * wd))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn warmup_schedule() {
        let cfg = OptimizerConfig {
            lr: 1.0,
            warmup_steps: 10,
            warmup_factor: 0.001,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.001);
        assert!((cfg.lr_at(5) - (0.001 + 0.999 * 0.5)).abs() < 1e-12);
        assert_eq!(cfg.lr_at(10), 1.0);
        assert_eq!(cfg.lr_at(100), 1.0);
    }

    #[test]
    fn first_step_matches_hand_update() {
        let x = Var::new(&[2.0f64], &Device::Cpu).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        // bias-corrected first step moves by lr·sign(g); decay applied first
        let want = 2.0 * (1.0 - 0.1 * 0.01) - 0.1 * 4.0 / (4.0 + 1e-8);
        let got = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 0.05), "{v:?}");
    }
}
