//! AdamW with decoupled weight decay and global-norm gradient clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, p)| Array2::zeros(p.dim()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update. Parameters without a gradient still decay.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        self.t += 1;
        let c = self.config;
        let lr = T::lit(c.learning_rate);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        for (i, p) in params.values_mut().enumerate() {
            p.mapv_inplace(|x| x * decay);
            let Some(g) = &grads.grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> T {
    let norm = grads.global_norm();
    let max = T::lit(max_norm);
    if max_norm > 0.0 && norm > max {
        grads.scale(max / (norm + T::lit(1e-12)));
    }
    norm
}
