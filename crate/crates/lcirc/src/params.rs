//! Named parameter storage, trainability masks, and the Adam optimizer.
//!
//! All model weights live in one [`Params`] map keyed by dotted names
//! (`base.layer2.attn.wq`, `gca.3.mlp.w1`, ...). Forward passes bind names
//! onto a tape; the [`TrainMask`] decides which bindings are trainable, so
//! freezing the base model is a name predicate rather than a code path.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{adam_update, Tensor};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Total parameter count under a name prefix.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Merge another parameter set; colliding names are an error.
    pub fn absorb(&mut self, other: Params) -> Result<()> {
        for (name, t) in other.map {
            if self.map.contains_key(&name) {
                return Err(Error::Contract(format!(
                    "parameter `{name}` defined twice"
                )));
            }
            self.map.insert(name, t);
        }
        Ok(())
    }

    /// Bind a named parameter onto the tape; trainability comes from `mask`.
    pub fn bind(&self, tape: &mut Tape, name: &str, mask: &TrainMask) -> Result<Var> {
        let t = self.get(name)?;
        Ok(tape.param(name, t, mask.is_trainable(name)))
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, t) in &self.map {
            if !t.is_finite() {
                return Err(Error::Numeric(format!(
                    "parameter `{name}` contains a non-finite value"
                )));
            }
        }
        Ok(())
    }
}

/// Predicate deciding which named parameters receive gradients.
#[derive(Debug, Clone)]
pub enum TrainMask {
    All,
    None,
    /// Parameters whose names start with any of these prefixes stay frozen.
    FreezePrefixes(Vec<String>),
}

impl TrainMask {
    pub fn freeze_base() -> Self {
        TrainMask::FreezePrefixes(vec!["base.".to_string()])
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self {
            TrainMask::All => true,
            TrainMask::None => false,
            TrainMask::FreezePrefixes(prefixes) => {
                !prefixes.iter().any(|p| name.starts_with(p))
            }
        }
    }
}

/// Adam with linear warmup to a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &crate::config::ModelConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            warmup_steps: cfg.warmup_steps,
            grad_clip: cfg.grad_clip,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        self.lr * ((step as f64 + 1.0) / w).min(1.0)
    }

    /// Global gradient norm across all entries.
    pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
        grads
            .values()
            .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// One update over every (param, grad) pair; returns (lr used, pre-clip
    /// gradient norm). Gradients for names missing from `params` are an error.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(f64, f64)> {
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.shape != grad.shape {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    grad.shape, p.shape
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            if scale == 1.0 {
                adam_update(
                    &mut p.data, &grad.data, m, v, self.step, lr, self.beta1, self.beta2,
                    self.eps,
                );
            } else {
                let clipped: Vec<f64> = grad.data.iter().map(|g| g * scale).collect();
                adam_update(
                    &mut p.data, &clipped, m, v, self.step, lr, self.beta1, self.beta2,
                    self.eps,
                );
            }
        }
        Ok((lr, norm))
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn absorb_rejects_collisions() {
        let mut a = Params::new();
        a.insert("x", Tensor::scalar(1.0));
        let mut b = Params::new();
        b.insert("x", Tensor::scalar(2.0));
        assert!(a.absorb(b).is_err());
    }

    #[test]
    fn freeze_mask_matches_prefix() {
        let mask = TrainMask::freeze_base();
        assert!(!mask.is_trainable("base.layer0.wq"));
        assert!(mask.is_trainable("compressor.block0.gain"));
        assert!(mask.is_trainable("gca.0.gate_attn"));
    }

    #[test]
    fn warmup_ramps_then_holds() {
        let mut cfg = ModelConfig::default();
        cfg.lr = 1.0;
        cfg.warmup_steps = 10;
        let opt = Adam::new(&cfg);
        assert!((opt.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((opt.lr_at(4) - 0.5).abs() < 1e-12);
        assert!((opt.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((opt.lr_at(500) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_step_reduces_quadratic() {
        let mut cfg = ModelConfig::default();
        cfg.lr = 0.1;
        cfg.warmup_steps = 0;
        cfg.grad_clip = 0.0;
        let mut opt = Adam::new(&cfg);
        let mut params = Params::new();
        params.insert("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        for _ in 0..200 {
            let w = params.get("w").unwrap();
            let grad = Tensor::new(vec![2], vec![2.0 * w.data[0], 2.0 * w.data[1]]).unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), grad);
            opt.step(&mut params, &grads).unwrap();
        }
        let w = params.get("w").unwrap();
        assert!(w.data.iter().all(|x| x.abs() < 0.05), "{:?}", w.data);
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut cfg = ModelConfig::default();
        cfg.lr = 1.0;
        cfg.warmup_steps = 0;
        cfg.grad_clip = 1.0;
        let mut opt = Adam::new(&cfg);
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[2]));
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![300.0, 400.0]).unwrap(),
        );
        let (_, norm) = opt.step(&mut params, &grads).unwrap();
        assert!((norm - 500.0).abs() < 1e-9);
    }
}
