//! Conservative per-task predictions used when every chain fails verification.

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::stats;
use crate::tools::linear_fill;
use crate::{Tensor, TimeSeriesWindow};

/// Last observed value of each channel repeated over the horizon.
pub fn repeat_last(window: &TimeSeriesWindow, horizon: usize) -> Result<Tensor> {
    let d = window.channels();
    let last: Vec<f64> = (0..d).map(|c| window.observed(c).last().copied().unwrap_or(0.0)).collect();
    if horizon == 0 {
        return Err(Error::Contract("forecast horizon must be positive".into()));
    }
    Ok(Tensor::new(&[horizon, d], (0..horizon).flat_map(|_| last.iter().copied()).collect())?)
}

/// Straight line through the last two observed values of each channel.
pub fn linear_extrapolation(window: &TimeSeriesWindow, horizon: usize) -> Result<Tensor> {
    let d = window.channels();
    if horizon == 0 {
        return Err(Error::Contract("forecast horizon must be positive".into()));
    }
    let mut out = vec![0.0; horizon * d];
    for c in 0..d {
        let obs: Vec<(usize, f64)> = (0..window.len()).filter(|&t| window.is_observed(t, c)).map(|t| (t, window.get(t, c))).collect();
        let (t1, v1) = obs.last().copied().unwrap_or((window.len() - 1, 0.0));
        let slope = match obs.len() {
            n if n >= 2 => {
                let (t0, v0) = obs[n - 2];
                (v1 - v0) / (t1 - t0) as f64
            }
            _ => 0.0,
        };
        for h in 0..horizon {
            out[h * d + c] = v1 + slope * (window.len() + h - t1) as f64;
        }
    }
    Ok(Tensor::new(&[horizon, d], out)?)
}

/// Masked cells filled by linear interpolation of observed neighbours.
pub fn interpolate(window: &TimeSeriesWindow) -> Tensor {
    match &window.mask {
        Some(m) => linear_fill(&window.values, m),
        None => window.values.clone(),
    }
}

/// Logits with a single unit at `class`.
pub fn majority_logits(classes: usize, class: usize) -> Result<Tensor> {
    if classes == 0 {
        return Err(Error::Contract("classification needs at least one class".into()));
    }
    let mut v = vec![0.0; classes];
    v[class.min(classes - 1)] = 1.0;
    Ok(Tensor::from_vec(v))
}

/// Largest absolute z-score across channels at each step.
pub fn zscore(window: &TimeSeriesWindow) -> Tensor {
    let (l, d) = (window.len(), window.channels());
    let moments: Vec<(f64, f64)> = (0..d)
        .map(|c| {
            let obs = window.observed(c);
            (stats::mean(&obs), stats::std(&obs).max(1e-8))
        })
        .collect();
    let scores = (0..l)
        .map(|t| {
            (0..d)
                .filter(|&c| window.is_observed(t, c))
                .map(|c| ((window.get(t, c) - moments[c].0) / moments[c].1).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Tensor::from_vec(scores)
}

/// Full-window mask helper for callers that hold a mask separately.
pub fn observed_mask(window: &TimeSeriesWindow) -> Mask {
    window.mask.clone().unwrap_or_else(|| Mask::empty(window.len(), window.channels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win() -> TimeSeriesWindow {
        TimeSeriesWindow::new(Tensor::new(&[4, 2], vec![1.0, 10.0, 2.0, 10.0, 3.0, 10.0, 4.0, 10.0]).unwrap()).unwrap()
    }

    #[test]
    fn repeat_and_extrapolate() {
        assert_eq!(repeat_last(&win(), 2).unwrap().data(), &[4.0, 10.0, 4.0, 10.0]);
        assert_eq!(linear_extrapolation(&win(), 2).unwrap().data(), &[5.0, 10.0, 6.0, 10.0]);
    }

    #[test]
    fn zscore_of_constant_is_zero() {
        let w = TimeSeriesWindow::new(Tensor::full(&[5, 1], 2.0)).unwrap();
        assert!(zscore(&w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn majority_is_one_hot() {
        assert_eq!(majority_logits(3, 1).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert!(majority_logits(0, 0).is_err());
    }
}
