use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::{ArrayD, Zip};

use super::{ParamId, ParamStore, Real};

/// Learning rate as a function of the optimizer step (0-based).
pub trait LrSchedule {
    fn lr(&self, step: usize) -> f64;
}

/// Cosine decay from `lr0` to `final_ratio·lr0` over `total_steps`, flat after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDecay {
    pub lr0: f64,
    pub final_ratio: f64,
    pub total_steps: usize,
}

impl LrSchedule for CosineDecay {
    fn lr(&self, step: usize) -> f64 {
        let lr_min = self.lr0 * self.final_ratio;
        if self.total_steps == 0 {
            return self.lr0;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        lr_min + 0.5 * (self.lr0 - lr_min) * (1.0 + (PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
            eps: 1e-7,
        }
    }
}

struct Moments<T: Real> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    t: i32,
}

/// Bias-corrected Adam with per-parameter moments and step counters.
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    step: usize,
    moments: HashMap<ParamId, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update with learning rate `lr` to every parameter that has a gradient.
    pub fn step<'g, I>(&mut self, params: &mut ParamStore<T>, grads: I, lr: f64)
    where
        I: IntoIterator<Item = (ParamId, &'g ArrayD<T>)>,
    {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let lr = T::of(lr);
        let eps = T::of(eps);
        let one = T::one();
        for (id, g) in grads {
            let mom = self.moments.entry(id).or_insert_with(|| Moments {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                t: 0,
            });
            mom.t += 1;
            let c1 = T::of(1.0 - beta1.powi(mom.t));
            let c2 = T::of(1.0 - beta2.powi(mom.t));
            let value = params.value_mut(id);
            assert_eq!(value.shape(), g.shape(), "gradient shape for {:?}", id);
            Zip::from(value)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
