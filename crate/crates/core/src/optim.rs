//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;

/// A trainable tensor and whether weight decay applies to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub decay: bool,
}

impl Param {
    pub fn weight(name: &str, value: Tensor) -> Self {
        Self {
            name: name.to_string(),
            value,
            decay: true,
        }
    }

    /// Biases and other vectors excluded from weight decay.
    pub fn bias(name: &str, value: Tensor) -> Self {
        Self {
            name: name.to_string(),
            value,
            decay: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Param]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

/// Linear warmup then cosine decay, evaluated per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            min: lr,
            warmup_epochs: 0,
            epochs: 1,
        }
    }

    /// `base·(e+1)/warmup` during warmup, then cosine from `base` to `min`
    /// over the remaining epochs.
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs);
        if span <= 1 {
            return self.base;
        }
        let progress = ((epoch - self.warmup_epochs) as f64 / (span - 1) as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
