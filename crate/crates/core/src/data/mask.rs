use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsagent_autodiff::Scalar;

use super::window::{Mask, Window};
use crate::error::{Error, Result};

/// Mask exactly `round(ratio·L·D)` distinct cells, zeroing them and keeping the originals as
/// ground truth.
pub fn apply_mask<T: Scalar>(window: &Window<T>, ratio: f64, seed: u64) -> Result<Window<T>> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(Error::Contract(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let (l, d) = (window.len(), window.channels());
    let cells = l * d;
    let count = (ratio * cells as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask::empty(l, d);
    for i in rand::seq::index::sample(&mut rng, cells, count.min(cells)) {
        mask.set(i / d, i % d, true);
    }
    let mut out = window.clone();
    out.truth = Some(window.truth.clone().unwrap_or_else(|| window.values.clone()));
    for (v, &m) in out.values.data_mut().iter_mut().zip(mask.bits()) {
        if m {
            *v = T::zero();
        }
    }
    out.mask = Some(mask);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsagent_autodiff::Tensor;

    fn window(l: usize, d: usize) -> Window<f64> {
        Window::new(Tensor::new(&[l, d], (0..l * d).map(|i| i as f64 + 1.0).collect()).unwrap()).unwrap()
    }

    #[test]
    fn exact_count() {
        let m = apply_mask(&window(96, 7), 0.25, 3).unwrap();
        assert_eq!(m.mask.as_ref().unwrap().count(), 168);
        let zeros = m.values.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 168);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let w = window(10, 2);
        let m = apply_mask(&w, 0.0, 1).unwrap();
        assert_eq!(m.values, w.values);
        assert_eq!(m.mask.unwrap().count(), 0);
    }

    #[test]
    fn seeded_and_validated() {
        let w = window(12, 3);
        assert_eq!(apply_mask(&w, 0.5, 9).unwrap().mask, apply_mask(&w, 0.5, 9).unwrap().mask);
        assert!(apply_mask(&w, 1.5, 0).is_err());
        assert!(apply_mask(&w, -0.1, 0).is_err());
    }
}
