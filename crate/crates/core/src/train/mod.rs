//! Losses, optimization loop, metrics and ablation planning.

pub mod ablation;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod schedule;
pub mod trainer;

pub use ablation::{plan, Variant};
pub use eval::{evaluate, AnchorStats, ErrorPair, MetricsReport};
pub use loss::{masked_mse, mse, task_loss, total_loss};
pub use metrics::{accuracy, best_threshold, mse_mae, point_adjust, point_adjust_f1, AnomalyMetrics, Counts};
pub use schedule::{cosine_lr, EarlyStopping, Verdict};
pub use trainer::{train, validation_loss, EpochRecord, History};
