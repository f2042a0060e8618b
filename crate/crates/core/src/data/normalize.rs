use serde::{Deserialize, Serialize};
use tsagent_autodiff::{Scalar, Tensor};

use super::window::Window;
use crate::stats;

pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStrategy {
    #[default]
    Revin,
    ChannelIndependent,
    Robust,
}

/// Per-channel location and scale retained for inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub strategy: NormStrategy,
    pub location: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> NormState<T> {
    pub fn identity(channels: usize) -> Self {
        NormState { strategy: NormStrategy::Revin, location: vec![T::zero(); channels], scale: vec![T::one(); channels] }
    }

    /// Statistics over the observed entries of each channel.
    pub fn fit(window: &Window<T>, strategy: NormStrategy) -> Self {
        let d = window.channels();
        let mut location = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for c in 0..d {
            let obs = window.observed(c);
            let (loc, sc) = match strategy {
                NormStrategy::Revin | NormStrategy::ChannelIndependent => (stats::mean(&obs), stats::std(&obs)),
                NormStrategy::Robust => (stats::median(&obs), stats::iqr(&obs)),
            };
            location.push(loc);
            scale.push(sc.max(T::lit(SCALE_FLOOR)));
        }
        NormState { strategy, location, scale }
    }

    pub fn channels(&self) -> usize {
        self.location.len()
    }

    /// Normalize every row of an R×D matrix.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        self.map_rows(x, |v, c| (v - self.location[c]) / self.scale[c])
    }

    pub fn invert(&self, x: &Tensor<T>) -> Tensor<T> {
        self.map_rows(x, |v, c| v * self.scale[c] + self.location[c])
    }

    fn map_rows(&self, x: &Tensor<T>, f: impl Fn(T, usize) -> T) -> Tensor<T> {
        let d = self.channels();
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, i % d)).collect();
        Tensor::new(x.shape(), data).expect("shape preserved")
    }
}

/// Normalize observed entries; masked entries are left as stored.
pub fn normalize<T: Scalar>(window: &Window<T>, strategy: NormStrategy) -> (Window<T>, NormState<T>) {
    let state = NormState::fit(window, strategy);
    let mut out = window.clone();
    let d = window.channels();
    for (i, v) in out.values.data_mut().iter_mut().enumerate() {
        let (t, c) = (i / d, i % d);
        if window.is_observed(t, c) {
            *v = (*v - state.location[c]) / state.scale[c];
        }
    }
    (out, state)
}

pub fn denormalize<T: Scalar>(window: &Window<T>, state: &NormState<T>) -> Window<T> {
    let mut out = window.clone();
    let d = window.channels();
    for (i, v) in out.values.data_mut().iter_mut().enumerate() {
        let (t, c) = (i / d, i % d);
        if window.is_observed(t, c) {
            *v = *v * state.scale[c] + state.location[c];
        }
    }
    out
}

/// Dataset-level standardization fitted on a training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on the leading `rows` of a T×D series.
    pub fn fit(series: &Tensor<f64>, rows: usize) -> Self {
        let d = series.shape()[1];
        let rows = rows.min(series.shape()[0]);
        let (mut mean, mut std) = (Vec::with_capacity(d), Vec::with_capacity(d));
        for c in 0..d {
            let col: Vec<f64> = (0..rows).map(|t| series.data()[t * d + c]).collect();
            mean.push(stats::mean(&col));
            std.push(stats::std(&col).max(SCALE_FLOOR));
        }
        Standardizer { mean, std }
    }

    pub fn transform(&self, series: &Tensor<f64>) -> Tensor<f64> {
        let d = self.mean.len();
        let data = series.data().iter().enumerate().map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d]).collect();
        Tensor::new(series.shape(), data).expect("shape preserved")
    }
}
