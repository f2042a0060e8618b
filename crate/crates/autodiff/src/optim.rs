//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::{GradMap, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Optimizer state: first/second moments per parameter and the step counter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        AdamW { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. A non-finite gradient aborts the step before any
    /// parameter or moment is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>, lr: f64) -> Result<()> {
        for (id, p) in store.iter() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(TensorError::Numeric { op: format!("adamw gradient of {}", p.name) });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let value = store.value_mut(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64, g: f64) -> (ParamStore<f64>, GradMap<f64>) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(v));
        let mut grads = GradMap::zeros_like(&store);
        let mut tape = crate::Tape::new();
        let w = tape.param(&store, id);
        let s = tape.scale(w, g).unwrap();
        let l = tape.sum(s).unwrap();
        grads.accumulate(tape.backward(l).unwrap().params());
        (store, grads)
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut store, grads) = single(1.5, 0.0);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.value(store.id("w").unwrap()).item(), 1.5);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let (mut store, grads) = single(1.0, 1.0);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, &grads, 0.1).unwrap();
        // bias-corrected first step is lr * g/(|g| + eps) = 0.1
        let w = store.value(store.id("w").unwrap()).item();
        assert!(w < 1.0);
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_wd() {
        let (mut store, grads) = single(1.0, 0.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, &grads, 0.1).unwrap();
        let w = store.value(store.id("w").unwrap()).item();
        assert!((w - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(2.0));
        let mut grads = GradMap::zeros_like(&store);
        let mut other = GradMap::from_parts(vec![Some(Tensor::scalar(f64::NAN))]);
        grads.accumulate(&other);
        other.scale(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        assert!(opt.step(&mut store, &grads, 0.1).is_err());
        assert_eq!(store.value(id).item(), 2.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
