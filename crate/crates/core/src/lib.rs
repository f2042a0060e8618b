//! Tool-driven multi-agent time series analysis.

pub mod analyzer;
pub mod config;
pub mod coordination;
pub mod data;
pub mod engine;
pub mod error;
pub mod executor;
pub mod nn;
pub mod reasoner;
pub mod run;
pub mod spectral;
pub mod stats;
pub mod tools;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tsagent_autodiff as autodiff;

pub type Tensor = tsagent_autodiff::Tensor<f64>;
pub type Tape = tsagent_autodiff::Tape<f64>;
pub type ParamStore = tsagent_autodiff::ParamStore<f64>;
pub type GradMap = tsagent_autodiff::GradMap<f64>;
pub type TimeSeriesWindow = data::Window<f64>;
pub type NormState = data::NormState<f64>;
