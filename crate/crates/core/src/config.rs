//! Run configuration: one TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyzer::{AnalyzerConfig, PlotConfig};
use crate::data::{ColumnSpec, NormStrategy, SplitRatios, SynthKind, Task};
use crate::error::{Error, Result};
use crate::executor::ExecutorConfig;
use crate::reasoner::numeric::{CompletionStrategy, OdeConfig};
use crate::reasoner::visual::{AnchorRanges, TauMap, VlmConfig};
use crate::tools::RegistryOverrides;

/// Layer widths and depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_memory: usize,
    /// Latent width of the trajectory solver.
    pub hidden_dim: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub dropout: f64,
    pub patch_len: usize,
    pub stride: usize,
    pub moving_avg: usize,
    pub top_k_periods: usize,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub vae_latent: usize,
    pub vae_hidden: usize,
    pub vae_beta: f64,
    pub anomaly_scales: Vec<usize>,
    pub router_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_memory: 64,
            hidden_dim: 128,
            d_ff: 128,
            n_heads: 4,
            e_layers: 2,
            dropout: 0.1,
            patch_len: 16,
            stride: 8,
            moving_avg: 25,
            top_k_periods: 3,
            tcn_layers: 4,
            tcn_kernel: 3,
            vae_latent: 16,
            vae_hidden: 64,
            vae_beta: 1.0,
            anomaly_scales: vec![4, 16],
            router_hidden: 32,
        }
    }
}

/// Component toggles for ablation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub enable_visual_reasoner: bool,
    pub enable_numeric_reasoner: bool,
    pub enable_shared_memory: bool,
    pub enable_gated_attention: bool,
    pub enable_tools: bool,
    pub completion_strategy: CompletionStrategy,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            enable_visual_reasoner: true,
            enable_numeric_reasoner: true,
            enable_shared_memory: true,
            enable_gated_attention: true,
            enable_tools: true,
            completion_strategy: CompletionStrategy::Ode,
        }
    }
}

/// Anchor provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorSource {
    #[default]
    Offline,
    Vlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub source: AnchorSource,
    pub ranges: AnchorRanges,
    /// Responses below this confidence fall back to the offline oracle.
    pub confidence_threshold: f64,
    pub max_anchors: usize,
    pub tau: TauMap,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            source: AnchorSource::Offline,
            ranges: AnchorRanges::default(),
            confidence_threshold: 0.7,
            max_anchors: 20,
            tau: TauMap::default(),
        }
    }
}

/// Generated input used instead of a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub signal: SynthKind,
    pub rows: usize,
    pub channels: usize,
    /// Spike spacing; replaces explicit positions of a spike signal when set.
    pub spike_spacing: Option<usize>,
    /// Classification corpus size and class count.
    pub samples: usize,
    pub classes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            signal: SynthKind::SinePlusTrend { period: 24.0, amplitude: 1.0, slope: 0.002, noise: 0.05 },
            rows: 2000,
            channels: 1,
            spike_spacing: None,
            samples: 200,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    pub columns: ColumnSpec,
    pub seq_len: usize,
    pub pred_len: usize,
    pub mask_ratio: f64,
    pub split: SplitRatios,
    /// Per-window normalization applied before the tools.
    pub normalization: NormStrategy,
    /// Dataset-level standardization fitted on the training rows.
    pub standardize: bool,
    pub train_stride: usize,
    /// Evaluation window stride; defaults to 1, or `seq_len` for detection.
    pub eval_stride: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synthetic: None,
            columns: ColumnSpec::default(),
            seq_len: 96,
            pred_len: 96,
            mask_ratio: 0.25,
            split: SplitRatios::default(),
            normalization: NormStrategy::Revin,
            standardize: true,
            train_stride: 1,
            eval_stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinationConfig {
    /// Weight of the memory regularizer in the total loss.
    pub lambda_com: f64,
}

impl Default for CoordinationConfig {
    fn default() -> Self {
        CoordinationConfig { lambda_com: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Training overrides; unset fields take the per-task defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { lr: None, batch_size: None, epochs: None, patience: 3, weight_decay: 0.0, grad_clip: Some(5.0) }
    }
}

/// Resolved training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
    pub lambda_com: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Task defaults: `(lr, batch, epochs)`.
    pub fn defaults(task: Task) -> (f64, usize, usize) {
        match task {
            Task::Forecast => (1e-4, 32, 10),
            Task::Impute => (1e-3, 16, 10),
            Task::Classify => (1e-3, 16, 30),
            Task::Detect => (1e-4, 128, 10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if !(self.lambda_com >= 0.0 && self.lambda_com.is_finite()) {
            return Err(Error::Config(format!("coordination.lambda_com must be non-negative, got {}", self.lambda_com)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum ThresholdRule {
    /// Best point-adjusted F1 over validation scores.
    #[default]
    BestF1,
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: ThresholdRule,
    /// Parameters to load for evaluation-only runs.
    pub checkpoint: Option<PathBuf>,
    /// Write a forecast or series plot for the first test window.
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: ThresholdRule::default(), checkpoint: None, plots: true }
    }
}

/// Everything a run needs, one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for window preparation and evaluation.
    pub workers: usize,
    pub data: DataConfig,
    pub analyzer: AnalyzerConfig,
    pub plot: PlotConfig,
    pub anchors: AnchorConfig,
    pub vlm: VlmConfig,
    pub model: ModelConfig,
    pub ode: OdeConfig,
    pub coordination: CoordinationConfig,
    pub ablation: AblationFlags,
    pub executor: ExecutorConfig,
    pub tools: RegistryOverrides,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Forecast,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            workers: 1,
            data: DataConfig::default(),
            analyzer: AnalyzerConfig::default(),
            plot: PlotConfig::default(),
            anchors: AnchorConfig::default(),
            vlm: VlmConfig::default(),
            model: ModelConfig::default(),
            ode: OdeConfig::default(),
            coordination: CoordinationConfig::default(),
            ablation: AblationFlags::default(),
            executor: ExecutorConfig::default(),
            tools: RegistryOverrides::default(),
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML; unknown keys and type errors name the offending path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let (lr, batch, epochs) = TrainConfig::defaults(self.task);
        TrainConfig {
            task: self.task,
            lr: self.train.lr.unwrap_or(lr),
            batch_size: self.train.batch_size.unwrap_or(batch),
            epochs: self.train.epochs.unwrap_or(epochs),
            loss_kind: if self.task == Task::Classify { LossKind::CrossEntropy } else { LossKind::Mse },
            lambda_com: self.coordination.lambda_com,
            patience: self.train.patience,
            weight_decay: self.train.weight_decay,
            grad_clip: self.train.grad_clip,
            seed: self.seed,
        }
    }

    pub fn eval_stride(&self) -> usize {
        self.data.eval_stride.unwrap_or(if self.task == Task::Detect { self.data.seq_len } else { 1 }).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.path, &d.synthetic) {
            (None, None) => return Err(Error::Config("data.path or data.synthetic is required".into())),
            (Some(_), Some(_)) => return Err(Error::Config("set only one of data.path and data.synthetic".into())),
            _ => {}
        }
        if d.seq_len == 0 {
            return Err(Error::Config("data.seq_len must be positive".into()));
        }
        if self.task == Task::Forecast && d.pred_len == 0 {
            return Err(Error::Config("data.pred_len must be positive for forecasting".into()));
        }
        if !(0.0..1.0).contains(&d.mask_ratio) {
            return Err(Error::Config(format!("data.mask_ratio must lie in [0, 1), got {}", d.mask_ratio)));
        }
        d.split.validate()?;
        if d.train_stride == 0 {
            return Err(Error::Config("data.train_stride must be positive".into()));
        }
        let m = &self.model;
        if m.d_model == 0 || m.d_memory == 0 || m.n_heads == 0 {
            return Err(Error::Config("model widths and head count must be positive".into()));
        }
        if m.d_model % m.n_heads != 0 || m.d_memory % m.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.n_heads = {} must divide d_model = {} and d_memory = {}",
                m.n_heads, m.d_model, m.d_memory
            )));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("model.dropout must lie in [0, 1), got {}", m.dropout)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anchors.confidence_threshold) {
            return Err(Error::Config("anchors.confidence_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.executor.greedy_threshold) || !(1..=3).contains(&self.executor.max_ensemble) {
            return Err(Error::Config("executor.greedy_threshold must lie in [0, 1] and max_ensemble in 1..=3".into()));
        }
        if let ThresholdRule::Percentile(p) = self.eval.threshold {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("eval.threshold percentile {p} outside [0, 100]")));
            }
        }
        self.ode.steps()?;
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_path_alone_is_valid_for_every_task() {
        for task in Task::ALL {
            let cfg = RunConfig::from_toml_str(&format!("task = \"{task}\"\n[data]\npath = \"x.csv\"\n")).unwrap();
            assert_eq!(cfg.task, task);
            assert_eq!(cfg.model.d_model, 64);
            assert_eq!(cfg.anchors.source, AnchorSource::Offline);
        }
    }

    #[test]
    fn unknown_key_names_path() {
        let err = RunConfig::from_toml_str("[data]\npath = \"x.csv\"\n[model]\nd_modle = 3\n").unwrap_err();
        assert!(err.to_string().contains("`model.d_modle`"), "{err}");
    }

    #[test]
    fn missing_data_rejected() {
        assert!(matches!(RunConfig::from_toml_str(""), Err(Error::Config(_))));
    }

    #[test]
    fn task_defaults() {
        let mut cfg = RunConfig::default();
        cfg.task = Task::Classify;
        let t = cfg.train_config();
        assert_eq!((t.lr, t.batch_size, t.epochs, t.loss_kind), (1e-3, 16, 30, LossKind::CrossEntropy));
        assert_eq!(t.patience, 3);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic = Some(SyntheticConfig::default());
        cfg.eval.threshold = ThresholdRule::Percentile(99.0);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn heads_must_divide_width() {
        let err = RunConfig::from_toml_str("[data]\npath = \"x\"\n[model]\nn_heads = 5\n").unwrap_err();
        assert!(err.to_string().contains("n_heads"));
    }
}
