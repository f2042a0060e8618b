use serde::{Deserialize, Serialize};
use tsagent_autodiff::{Scalar, Tensor};

use crate::error::{Error, Result};

/// The four supported analysis tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Forecast,
    Classify,
    Impute,
    Detect,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Forecast, Task::Classify, Task::Impute, Task::Detect];

    pub fn index(self) -> usize {
        match self {
            Task::Forecast => 0,
            Task::Classify => 1,
            Task::Impute => 2,
            Task::Detect => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Forecast => "forecast",
            Task::Classify => "classify",
            Task::Impute => "impute",
            Task::Detect => "detect",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(Task::Forecast),
            "classify" => Ok(Task::Classify),
            "impute" => Ok(Task::Impute),
            "detect" => Ok(Task::Detect),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Missing-cell indicator over an L×D window (`true` = missing).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Contract(format!("mask has {} bits for a {rows}x{cols} window", bits.len())));
        }
        Ok(Mask { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_missing(&self, t: usize, c: usize) -> bool {
        self.bits[t * self.cols + c]
    }

    pub fn set(&mut self, t: usize, c: usize, missing: bool) {
        self.bits[t * self.cols + c] = missing;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Time steps with at least one missing channel, ascending.
    pub fn missing_steps(&self) -> Vec<usize> {
        (0..self.rows).filter(|&t| (0..self.cols).any(|c| self.is_missing(t, c))).collect()
    }
}

/// Supervision attached to a window.
#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    None,
    /// H×D future values.
    Forecast(Tensor<T>),
    /// Zero-based class index.
    Class(usize),
    /// Per-step 0/1 anomaly labels, length L.
    Anomaly(Vec<u8>),
}

/// An observed L×D window plus its task payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    /// L×D values; missing cells hold 0.
    pub values: Tensor<T>,
    pub horizon: usize,
    pub target: Target<T>,
    pub mask: Option<Mask>,
    /// Values before masking, kept for imputation evaluation.
    pub truth: Option<Tensor<T>>,
    /// Offset of the first row in the source series.
    pub start: usize,
}

impl<T: Scalar> Window<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Contract(format!("window values must be a non-empty L x D matrix, got {s:?}")));
        }
        Ok(Window { values, horizon: 0, target: Target::None, mask: None, truth: None, start: 0 })
    }

    /// Single-channel window from a plain sequence.
    pub fn from_series(xs: &[T]) -> Result<Self> {
        Self::new(Tensor::new(&[xs.len(), 1], xs.to_vec())?)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, t: usize, c: usize) -> T {
        self.values.data()[t * self.channels() + c]
    }

    pub fn is_observed(&self, t: usize, c: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| !m.is_missing(t, c))
    }

    /// Observed values of channel `c` in time order.
    pub fn observed(&self, c: usize) -> Vec<T> {
        (0..self.len()).filter(|&t| self.is_observed(t, c)).map(|t| self.get(t, c)).collect()
    }

    /// Full column `c`, masked cells included as stored.
    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.len()).map(|t| self.get(t, c)).collect()
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask.as_ref().map_or(0.0, Mask::ratio)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if let Some(m) = &self.mask {
            if m.rows() != self.len() || m.cols() != self.channels() {
                return Err(Error::Contract("mask shape differs from values".into()));
            }
        }
        match &self.target {
            Target::Forecast(y) if y.shape() != [self.horizon, self.channels()] => {
                Err(Error::Contract(format!("forecast target {:?} for horizon {}", y.shape(), self.horizon)))
            }
            Target::Anomaly(l) if l.len() != self.len() => Err(Error::Contract("anomaly labels length differs".into())),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_round_trips_through_strings() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("regress".parse::<Task>().is_err());
    }

    #[test]
    fn mask_counts_and_steps() {
        let mut m = Mask::empty(4, 2);
        m.set(1, 0, true);
        m.set(1, 1, true);
        m.set(3, 1, true);
        assert_eq!(m.count(), 3);
        assert_eq!(m.missing_steps(), vec![1, 3]);
    }

    #[test]
    fn window_rejects_empty() {
        assert!(Window::<f64>::new(Tensor::zeros(&[0, 2])).is_err());
    }
}
