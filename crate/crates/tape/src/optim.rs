//! Decoupled-weight-decay Adam.

use crate::graph::{Gradients, ParamStore};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state: first and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Restores state previously obtained from [`AdamW::moments`] and [`AdamW::steps_taken`].
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Matrix>, v: Vec<Matrix>) -> Self {
        assert_eq!(m.len(), v.len());
        Self { config, step, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// still decayed, matching the usual decoupled formulation.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if weight_decay != 0.0 {
                p.scale_assign(1.0 - lr * weight_decay);
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::row_vector(&[3.0, -2.0]));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let wv = g.param(w);
                let sq = g.square(wv);
                let loss = g.sum(sq);
                g.backward(loss).into_params()
            };
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(w).data().iter().all(|x| x.abs() < 1e-2), "{:?}", store.get(w));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::row_vector(&[3.0, 4.0]));
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let s = g.sum(wv);
        let loss = g.scale(s, 10.0);
        let mut grads = g.backward(loss).into_params();
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 200f64.sqrt()).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
