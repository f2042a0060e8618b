//! Ingestion, windowing, normalization, masking and synthetic generators.

pub mod dataset;
pub mod loader;
pub mod mask;
pub mod normalize;
pub mod synth;
pub mod window;

pub use dataset::{build_dataset, Dataset, SplitSizes};
pub use loader::{load_dataset, ColumnSpec, SplitRatios, Table};
pub use mask::apply_mask;
pub use normalize::{denormalize, normalize, NormState, NormStrategy, Standardizer};
pub use synth::{synth_series, SynthKind};
pub use window::{Mask, Target, Task, Window};

pub type TimeSeriesWindow = Window<f64>;
