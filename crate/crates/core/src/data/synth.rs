//! Deterministic synthetic series for tests, demos and offline runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tsagent_autodiff::{Scalar, Tensor};

use super::window::{Target, Window};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    Sine {
        period: f64,
        amplitude: f64,
        #[serde(default)]
        noise: f64,
    },
    SinePlusTrend {
        period: f64,
        amplitude: f64,
        slope: f64,
        #[serde(default)]
        noise: f64,
    },
    RegimeShift {
        at: usize,
        delta: f64,
        #[serde(default)]
        noise: f64,
    },
    SpikeAnomaly {
        period: f64,
        amplitude: f64,
        positions: Vec<usize>,
        magnitude: f64,
        #[serde(default)]
        noise: f64,
    },
    Constant {
        value: f64,
    },
}

impl SynthKind {
    fn noise(&self) -> f64 {
        match self {
            SynthKind::Sine { noise, .. }
            | SynthKind::SinePlusTrend { noise, .. }
            | SynthKind::RegimeShift { noise, .. }
            | SynthKind::SpikeAnomaly { noise, .. } => *noise,
            SynthKind::Constant { .. } => 0.0,
        }
    }

    /// Noise-free value at time `t` with an extra phase offset (in steps).
    fn clean(&self, t: usize, shift: f64) -> f64 {
        let tf = t as f64 + shift;
        let sine = |period: f64, amp: f64| amp * (std::f64::consts::TAU * tf / period).sin();
        match self {
            SynthKind::Sine { period, amplitude, .. } => sine(*period, *amplitude),
            SynthKind::SinePlusTrend { period, amplitude, slope, .. } => sine(*period, *amplitude) + slope * t as f64,
            SynthKind::RegimeShift { at, delta, .. } => {
                if t >= *at {
                    *delta
                } else {
                    0.0
                }
            }
            SynthKind::SpikeAnomaly { period, amplitude, positions, magnitude, .. } => {
                sine(*period, *amplitude) + if positions.contains(&t) { *magnitude } else { 0.0 }
            }
            SynthKind::Constant { value } => *value,
        }
    }

    /// Per-step 0/1 anomaly labels for kinds that inject anomalies.
    pub fn labels(&self, length: usize) -> Option<Vec<u8>> {
        match self {
            SynthKind::SpikeAnomaly { positions, .. } => {
                Some((0..length).map(|t| u8::from(positions.contains(&t))).collect())
            }
            _ => None,
        }
    }
}

/// A single-channel window of `length` steps. Anomaly kinds carry their labels.
pub fn synth_series<T: Scalar>(kind: &SynthKind, length: usize, seed: u64) -> Result<Window<T>> {
    let data = synth_multichannel(kind, length, 1, seed);
    let mut w = Window::new(Tensor::new(&[length, 1], data.data().iter().map(|&v| T::lit(v)).collect())?)?;
    if let Some(labels) = kind.labels(length) {
        w.target = Target::Anomaly(labels);
    }
    Ok(w)
}

/// `rows × channels` series; channel `c > 0` is phase-shifted by `c` steps and scaled by
/// `1 + 0.25·c`, with independent Gaussian noise per cell.
pub fn synth_multichannel(kind: &SynthKind, rows: usize, channels: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, kind.noise().max(0.0)).expect("valid std");
    let mut data = Vec::with_capacity(rows * channels);
    for t in 0..rows {
        for c in 0..channels {
            let base = kind.clean(t, c as f64) * (1.0 + 0.25 * c as f64);
            let eps = if kind.noise() > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(base + eps);
        }
    }
    Tensor::new(&[rows, channels], data).expect("consistent shape")
}

/// Labelled classification corpus: class `k` is a noisy sine with period `4·(k+1)` and a
/// class-specific trend sign. Returns `(samples, labels)`, each sample `length × channels`.
pub fn synth_classification(
    samples: usize,
    length: usize,
    channels: usize,
    classes: usize,
    seed: u64,
) -> (Vec<Tensor<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut xs = Vec::with_capacity(samples);
    let mut ys = Vec::with_capacity(samples);
    for i in 0..samples {
        let k = i % classes.max(1);
        let period = 4.0 * (k + 1) as f64;
        let phase: f64 = rng.random_range(0.0..period);
        let trend = if k % 2 == 0 { 0.01 } else { -0.01 };
        let mut data = Vec::with_capacity(length * channels);
        for t in 0..length {
            for c in 0..channels {
                let v = (std::f64::consts::TAU * (t as f64 + phase + c as f64) / period).sin() + trend * t as f64;
                data.push(v + noise.sample(&mut rng));
            }
        }
        xs.push(Tensor::new(&[length, channels], data).expect("consistent shape"));
        ys.push(k);
    }
    (xs, ys)
}

/// Spike positions spread over a long anomaly series: one spike roughly every `spacing`
/// steps, jittered by the seed, never within 3 steps of the ends.
pub fn spike_positions(rows: usize, spacing: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = spacing.max(8);
    let mut out = Vec::new();
    let mut t = spacing / 2;
    while t + 3 < rows {
        let jitter = rng.random_range(0..spacing / 4);
        if t + jitter + 3 < rows {
            out.push(t + jitter);
        }
        t += spacing;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::dominant_period;
    use crate::stats;

    #[test]
    fn sine_period_12_has_dft_peak_at_8() {
        let w: Window<f64> = synth_series(&SynthKind::Sine { period: 12.0, amplitude: 1.0, noise: 0.0 }, 96, 0).unwrap();
        assert_eq!(dominant_period(&w.column(0)).unwrap().frequency, 8);
    }

    #[test]
    fn constant_has_zero_std() {
        let w: Window<f64> = synth_series(&SynthKind::Constant { value: 2.0 }, 50, 1).unwrap();
        assert_eq!(stats::std(&w.column(0)), 0.0);
    }

    #[test]
    fn spike_labels_mark_only_spikes() {
        let kind = SynthKind::SpikeAnomaly { period: 12.0, amplitude: 1.0, positions: vec![45], magnitude: 5.0, noise: 0.0 };
        let w: Window<f64> = synth_series(&kind, 96, 0).unwrap();
        let Target::Anomaly(l) = &w.target else { panic!("labels expected") };
        assert_eq!(l.iter().enumerate().filter(|(_, &v)| v == 1).map(|(t, _)| t).collect::<Vec<_>>(), vec![45]);
    }

    #[test]
    fn deterministic_given_seed() {
        let kind = SynthKind::Sine { period: 7.0, amplitude: 2.0, noise: 0.3 };
        assert_eq!(synth_multichannel(&kind, 40, 3, 5), synth_multichannel(&kind, 40, 3, 5));
        assert_ne!(synth_multichannel(&kind, 40, 3, 5), synth_multichannel(&kind, 40, 3, 6));
    }
}
