//! Adam and the learning-rate schedule.

use crate::diff::{Gradients, ParamArray, Real};
use crate::error::{Error, Result};

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
            eps: 1e-15,
        }
    }
}

/// Per-parameter moments. Each array keeps its own step count so that a
/// parameter first updated late (the main network after the pilot phase)
/// gets a fresh bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub moments: Vec<Moments>,
}

impl Adam {
    /// Zeroed moments mirroring `params`, indexed by parameter key.
    pub fn new<T: Real>(config: AdamConfig, params: &[&ParamArray<T>]) -> Self {
        let moments = params
            .iter()
            .map(|p| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
                t: 0,
            })
            .collect();
        Self { config, moments }
    }

    /// One bias-corrected update, `p −= lr·m̂ / √(v̂ + ε)`, for every
    /// parameter whose key appears in `grads` and passes `filter`.
    /// Non-finite gradients abort before anything changes.
    pub fn step<'a, T: Real>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut ParamArray<T>>,
        grads: &Gradients<T>,
        lr: f64,
        filter: impl Fn(&ParamArray<T>) -> bool,
    ) -> Result<Vec<usize>> {
        let mut params: Vec<&mut ParamArray<T>> = params.into_iter().filter(|p| filter(p)).collect();
        for p in &params {
            if let Some(g) = grads.get(p.key) {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in {} at index {i}",
                        p.name
                    )));
                }
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let mut updated = Vec::new();
        for p in params.iter_mut() {
            let Some(g) = grads.get(p.key) else { continue };
            let st = &mut self.moments[p.key.0];
            if st.m.len() != g.len() {
                return Err(Error::Shape(format!(
                    "{}: {} moments for {} gradients",
                    p.name,
                    st.m.len(),
                    g.len()
                )));
            }
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            for ((w, g), (m, v)) in p.values.iter_mut().zip(g).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let step = lr * (*m / bc1) / (*v / bc2 + eps).sqrt();
                *w = T::lit(w.as_f64() - step);
            }
            updated.push(p.key.0);
        }
        Ok(updated)
    }
}

/// Learning-rate schedule: linear warm-up from `lr/100` to `lr` over the
/// first 100 steps, then ×`factor` at each milestone fraction of `steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub steps: usize,
    pub warmup: usize,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Schedule {
    pub fn new(lr: f64, steps: usize) -> Self {
        Self {
            lr,
            steps,
            warmup: 100,
            milestones: vec![0.5, 0.75, 0.9],
            factor: 0.33,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup {
            0.01 + 0.99 * step as f64 / self.warmup as f64
        } else {
            1.0
        };
        let passed = self
            .milestones
            .iter()
            .filter(|f| step as f64 >= *f * self.steps as f64)
            .count();
        self.lr * warm * self.factor.powi(passed as i32)
    }
}
