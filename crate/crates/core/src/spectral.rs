//! Discrete Fourier amplitudes and dominant-period detection.
//!
//! A direct O(n²) transform is plenty for window lengths in the low hundreds and keeps the
//! results independent of any FFT size constraints.

use tsagent_autodiff::Scalar;

/// Amplitudes `|X_k|` for `k = 0..=n/2`.
pub fn dft_amplitudes<T: Scalar>(xs: &[T]) -> Vec<T> {
    let n = xs.len();
    if n == 0 {
        return Vec::new();
    }
    let two_pi = std::f64::consts::TAU;
    (0..=n / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, x) in xs.iter().enumerate() {
                let ang = two_pi * (k * t % n) as f64 / n as f64;
                re += x.as_f64() * ang.cos();
                im -= x.as_f64() * ang.sin();
            }
            T::lit((re * re + im * im).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Periodicity {
    pub period: usize,
    /// Frequency index of the peak (cycles per window).
    pub frequency: usize,
    /// Peak amplitude over the total non-DC amplitude, in [0, 1].
    pub strength: f64,
}

/// Dominant non-DC frequency. `None` for series shorter than 4 or with no spectral energy.
pub fn dominant_period<T: Scalar>(xs: &[T]) -> Option<Periodicity> {
    let amps = dft_amplitudes(xs);
    if xs.len() < 4 {
        return None;
    }
    let total: f64 = amps[1..].iter().map(|a| a.as_f64()).sum();
    if total <= 1e-12 * (1.0 + xs.iter().map(|x| x.as_f64().abs()).sum::<f64>()) {
        return None;
    }
    let (k, peak) = amps
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |best, (k, a)| if a.as_f64() > best.1 { (k, a.as_f64()) } else { best });
    let period = ((xs.len() as f64 / k as f64).round() as usize).max(2);
    Some(Periodicity { period, frequency: k, strength: (peak / total).clamp(0.0, 1.0) })
}

/// Top-`k` frequency indices (descending amplitude, ties to lower frequency) of a
/// precomputed amplitude spectrum, skipping DC.
pub fn top_frequencies(amps: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (1..amps.len()).collect();
    idx.sort_by(|&a, &b| amps[b].partial_cmp(&amps[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize, period: f64) -> Vec<f64> {
        (0..n).map(|t| (std::f64::consts::TAU * t as f64 / period).sin()).collect()
    }

    #[test]
    fn sine_period_12_peaks_at_index_8() {
        let p = dominant_period(&sine(96, 12.0)).unwrap();
        assert_eq!(p.frequency, 8);
        assert_eq!(p.period, 12);
        assert!(p.strength > 0.9);
    }

    #[test]
    fn constant_has_no_period() {
        assert!(dominant_period(&[5.0f64; 32]).is_none());
    }

    #[test]
    fn works_in_single_precision() {
        let xs: Vec<f32> = sine(48, 6.0).into_iter().map(|x| x as f32).collect();
        assert_eq!(dominant_period(&xs).unwrap().period, 6);
    }

    #[test]
    fn top_frequencies_orders_by_amplitude() {
        assert_eq!(top_frequencies(&[9.0, 1.0, 5.0, 5.0, 2.0], 3), vec![2, 3, 4]);
    }
}
