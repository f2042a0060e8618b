use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionStrategy {
    #[default]
    Ode,
    Linear,
    Quadratic,
    Repeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    pub step_size: f64,
    pub max_steps: usize,
    /// Blend toward the anchor latent after each step; 1 pins anchor rows exactly.
    pub anchor_pull: f64,
    /// Width of the anchor-conditioning kernel in time steps.
    pub kernel_bandwidth: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { step_size: 0.05, max_steps: 20, anchor_pull: 0.5, kernel_bandwidth: 4.0 }
    }
}

impl OdeConfig {
    /// `round(1/step_size)` capped at `max_steps` (itself at most 20).
    pub fn steps(&self) -> Result<usize> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("ode step_size must be positive, got {}", self.step_size)));
        }
        if !(0.0..=1.0).contains(&self.anchor_pull) {
            return Err(Error::Config(format!("anchor_pull must lie in [0, 1], got {}", self.anchor_pull)));
        }
        if !(self.kernel_bandwidth > 0.0) {
            return Err(Error::Config("kernel_bandwidth must be positive".into()));
        }
        Ok(((1.0 / self.step_size).round() as usize).clamp(1, self.max_steps.clamp(1, 20)))
    }
}

/// Right-hand side `dz/dt = f(t, z)`.
pub trait OdeSystem<T: Scalar> {
    fn derivative(&self, t: T, z: &[T]) -> Vec<T>;
}

impl<T: Scalar, F: Fn(T, &[T]) -> Vec<T>> OdeSystem<T> for F {
    fn derivative(&self, t: T, z: &[T]) -> Vec<T> {
        self(t, z)
    }
}

fn axpy<T: Scalar>(z: &[T], k: &[T], a: T) -> Vec<T> {
    z.iter().zip(k).map(|(&z, &k)| z + a * k).collect()
}

/// One classical Runge–Kutta step.
pub fn rk4_step<T: Scalar>(sys: &impl OdeSystem<T>, t: T, z: &[T], h: T) -> Vec<T> {
    let half = h / T::lit(2.0);
    let k1 = sys.derivative(t, z);
    let k2 = sys.derivative(t + half, &axpy(z, &k1, half));
    let k3 = sys.derivative(t + half, &axpy(z, &k2, half));
    let k4 = sys.derivative(t + h, &axpy(z, &k3, h));
    let six = T::lit(6.0);
    let two = T::lit(2.0);
    (0..z.len()).map(|i| z[i] + h / six * (k1[i] + two * k2[i] + two * k3[i] + k4[i])).collect()
}

/// `steps` RK4 steps of size `h` from `(t0, z0)`; errors on a non-finite state.
pub fn integrate_rk4<T: Scalar>(sys: &impl OdeSystem<T>, z0: &[T], t0: T, h: T, steps: usize) -> Result<Vec<T>> {
    let mut z = z0.to_vec();
    for k in 0..steps {
        z = rk4_step(sys, t0 + h * T::from_usize_lossy(k), &z, h);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Tensor(crate::autodiff::TensorError::Numeric { op: format!("ode step {}", k + 1) }));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay<T: Scalar>(h: f64) -> T {
        let f = |_t: T, z: &[T]| vec![-z[0]];
        let n = (1.0 / h).round() as usize;
        integrate_rk4(&f, &[T::one()], T::zero(), T::lit(h), n).unwrap()[0]
    }

    #[test]
    fn exponential_decay() {
        assert!((decay::<f64>(0.05) - (-1f64).exp()).abs() < 1e-6);
        assert!((decay::<f32>(0.05) - (-1f32).exp()).abs() < 1e-5);
    }

    #[test]
    fn fourth_order_convergence() {
        let e = (-1f64).exp();
        let coarse = (decay::<f64>(0.1) - e).abs();
        let fine = (decay::<f64>(0.05) - e).abs();
        assert!(coarse / fine >= 12.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn step_count() {
        assert_eq!(OdeConfig::default().steps().unwrap(), 20);
        assert_eq!(OdeConfig { step_size: 0.01, ..Default::default() }.steps().unwrap(), 20);
        assert_eq!(OdeConfig { step_size: 0.1, ..Default::default() }.steps().unwrap(), 10);
        assert!(OdeConfig { step_size: 0.0, ..Default::default() }.steps().is_err());
    }

    #[test]
    fn blow_up_names_step() {
        let f = |_t: f64, z: &[f64]| vec![z[0] * z[0] * 1e200];
        let err = integrate_rk4(&f, &[1e100], 0.0, 0.05, 20).unwrap_err();
        assert!(err.to_string().contains("ode step 1"), "{err}");
    }
}
