//! Statistical priors, salient-channel selection and plot rendering.

pub mod channels;
pub mod plot;
pub mod priors;

pub use channels::select_channels;
pub use plot::{render_plot, PlotConfig, PlotImage};
pub use priors::{compute_statistics, reference_series, AnalyzerConfig, ChannelStats, PriorBundle, SemanticTag};
