//! AdamW with decoupled weight decay and a warmup + decay learning-rate
//! schedule.
//!
//! Decay is applied only to parameters registered with [`Decay::Apply`];
//! norm gains, biases, and the temperature are registered excluded. Frozen
//! parameters are never touched, so their values stay bit-identical across
//! any number of steps.

use alloc::vec::Vec;

use crate::array::Array;
use crate::param::{Decay, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayShape {
    /// Hold the post-warmup rate constant.
    Constant,
    /// Cosine from the peak rate down to `final_factor * lr`.
    Cosine { final_factor: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub shape: DecayShape,
}

impl Schedule {
    /// Rate for 0-based step `t`. Warmup ramps linearly so step 0 already
    /// moves: factor (t+1)/warmup.
    pub fn rate(&self, t: usize) -> f64 {
        if self.warmup_steps > 0 && t < self.warmup_steps {
            return self.lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        match self.shape {
            DecayShape::Constant => self.lr,
            DecayShape::Cosine { final_factor } => {
                let lo = self.lr * final_factor;
                let span = self.total_steps.saturating_sub(self.warmup_steps);
                if span == 0 {
                    return lo;
                }
                let progress = (t - self.warmup_steps) as f64 / span as f64;
                let progress = progress.min(1.0);
                lo + 0.5 * (self.lr - lo) * (1.0 + libm::cos(core::f64::consts::PI * progress))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    /// First/second moment per parameter, lazily shaped on first step.
    m: Vec<Array<S>>,
    v: Vec<Array<S>>,
    t: usize,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update from the grads currently held in the store. `lr` comes
    /// from the schedule. Moments for frozen parameters stay zero.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(Array::zeros(p.value.rows(), p.value.cols()));
                self.v.push(Array::zeros(p.value.rows(), p.value.cols()));
            }
        }
        self.t += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_b1 = S::ONE - b1;
        let one_b2 = S::ONE - b2;
        let eps = S::from_f64(self.cfg.eps);
        let lr_s = S::from_f64(lr);
        let bc1 = S::from_f64(1.0 - libm::pow(self.cfg.beta1, self.t as f64));
        let bc2 = S::from_f64(1.0 - libm::pow(self.cfg.beta2, self.t as f64));

        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let decay = {
                let p = store.get(id);
                if p.frozen {
                    continue;
                }
                p.decay
            };
            let wd = match decay {
                Decay::Apply => S::from_f64(self.cfg.weight_decay),
                Decay::Exclude => S::ZERO,
            };
            let p = store.get_mut(id);
            let n = p.value.len();
            for k in 0..n {
                let g = p.grad.data()[k];
                let m = &mut self.m[i].data_mut()[k];
                *m = b1 * *m + one_b1 * g;
                let mk = *m;
                let v = &mut self.v[i].data_mut()[k];
                *v = b2 * *v + one_b2 * g * g;
                let vk = *v;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                let w = &mut p.value.data_mut()[k];
                *w -= lr_s * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }
}
