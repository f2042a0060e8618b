//! End-to-end runs: dataset, model, optional training, evaluation and report files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tsagent_autodiff::{read_checkpoint, write_checkpoint, CheckpointHeader};

use crate::analyzer::{render_plot, PlotConfig, PlotImage};
use crate::config::{AblationFlags, AnchorSource, RunConfig};
use crate::data::{build_dataset, Dataset, SplitSizes, Target, Task};
use crate::engine::{prepare_windows, AnchorOrigin, Model, Prepared, WindowResult};
use crate::error::{Error, Result};
use crate::executor::{ChainTrace, RoutingDecision};
use crate::reasoner::visual::AnchorSet;
use crate::tools::TaskDims;
use crate::train::{evaluate, plan, train, History, MetricsReport};
use crate::{Tensor, TimeSeriesWindow};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.tsag";
pub const ANCHORS_FILE: &str = "anchors.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Evaluate on the test split, loading `eval.checkpoint` when set.
    Run,
    /// Train, save a checkpoint, then evaluate.
    Train,
    /// Train and evaluate once per ablation variant.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Train => "train",
            Command::Ablate => "ablate",
        }
    }
}

/// One metric row: a full run under one set of ablation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub flags: AblationFlags,
    pub history: Option<History>,
    pub metrics: MetricsReport,
}

/// Deterministic part of a run: no timings and no paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub command: Command,
    pub task: Task,
    pub seed: u64,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowTrace {
    pub start: usize,
    pub origin: AnchorOrigin,
    pub anchors: usize,
    pub decision: Option<RoutingDecision>,
    pub chains: Vec<ChainTrace>,
    pub corrections: Vec<String>,
    pub fallback_used: bool,
    pub gate_mean: Option<f64>,
}

impl WindowTrace {
    fn of(p: &Prepared, r: &WindowResult) -> Self {
        WindowTrace {
            start: p.window.start,
            origin: r.origin,
            anchors: r.anchors,
            decision: r.decision.clone(),
            chains: r.traces.clone(),
            corrections: r.prediction.corrections.clone(),
            fallback_used: r.prediction.fallback_used,
            gate_mean: r.gate_mean,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub prepare_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub plots: Vec<PathBuf>,
}

/// Everything about a run, including timings, traces and written files.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub engine_version: String,
    pub command: Command,
    pub config: RunConfig,
    pub dataset: SplitSizes,
    pub parameters: usize,
    pub checkpoint_loaded: Option<PathBuf>,
    pub rows: Vec<Row>,
    /// Per-window traces of the first row.
    pub traces: Vec<WindowTrace>,
    pub timings: Timings,
    pub artifacts: Artifacts,
}

/// Model sized for the dataset.
pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<Model> {
    let dims = TaskDims { seq_len: cfg.data.seq_len, pred_len: cfg.data.pred_len, channels: ds.channels(), classes: ds.classes() };
    let mut model = Model::new(cfg, dims)?;
    model.majority_class = ds.majority_class;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader { engine_version: ENGINE_VERSION.into(), seed: model.cfg.seed };
    write_checkpoint(&mut w, &model.store, &header)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load parameters into `model`. A missing or incompatible file is a configuration error.
pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<CheckpointHeader> {
    let file = File::open(path).map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?;
    let (header, store) =
        read_checkpoint(&mut BufReader::new(file)).map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?;
    model
        .store
        .load_from(&store)
        .map_err(|e| Error::Config(format!("checkpoint {} does not match the model: {e}", path.display())))?;
    Ok(header)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    let w = t.shape().get(1).copied().unwrap_or(1);
    t.data().iter().skip(c).step_by(w).copied().collect()
}

/// Truth against prediction for forecasts and imputations, the input series otherwise.
pub fn result_plot(p: &Prepared, r: &WindowResult, task: Task, cfg: &PlotConfig) -> Result<PlotImage> {
    let w = &p.window;
    let input = w.truth.as_ref().map_or_else(|| column(&w.values, 0), |t| column(t, 0));
    let lines: Vec<Vec<f64>> = match (task, &w.target) {
        (Task::Forecast, Target::Forecast(y)) => {
            let truth = [input.clone(), column(y, 0)].concat();
            let pred = [input, column(&r.prediction.value, 0)].concat();
            vec![truth, pred]
        }
        (Task::Impute, _) => vec![input, column(&r.prediction.value, 0)],
        _ => vec![input],
    };
    let n = lines[0].len();
    let data: Vec<f64> = (0..n).flat_map(|t| lines.iter().map(move |l| l[t])).collect();
    let win = TimeSeriesWindow::new(Tensor::new(&[n, lines.len()], data)?)?;
    let cfg = PlotConfig { channels: Some((0..lines.len()).collect()), show_mask_markers: false, ..cfg.clone() };
    render_plot(&win, &p.priors, &cfg)
}

fn summary_text(report: &RunReport) -> String {
    let mut s = format!(
        "{} {} seed {}: {} train / {} val / {} test windows, {} parameters\n",
        report.command.name(),
        report.config.task.name(),
        report.config.seed,
        report.dataset.train,
        report.dataset.val,
        report.dataset.test,
        report.parameters
    );
    for row in &report.rows {
        let m = &row.metrics;
        s += &format!("[{}]", row.label);
        if let (Some(mse), Some(mae)) = (m.mse, m.mae) {
            s += &format!(" mse {mse:.6} mae {mae:.6}");
        }
        if let Some(acc) = m.accuracy {
            s += &format!(" accuracy {acc:.2}%");
        }
        if let Some(a) = &m.anomaly {
            s += &format!(" precision {:.4} recall {:.4} f1 {:.4}", a.precision, a.recall, a.f1);
        }
        if let Some(a) = &m.anomaly_best {
            s += &format!(" best-f1 {:.4}", a.f1);
        }
        for (name, b) in &m.baselines {
            s += &format!(" | {name} {:.6}/{:.6}", b.mse, b.mae);
        }
        if let Some(h) = row.history.as_ref().and_then(|h| h.best_epoch) {
            s += &format!(" | best epoch {h}");
        }
        s += &format!(" | fallbacks {}\n", m.fallback_windows);
    }
    s
}

/// Execute a command and write `metrics.json`, `report.json` and `summary.txt` (plus the
/// checkpoint and plot when applicable) under `cfg.output_dir`.
pub fn execute(cfg: &RunConfig, command: Command, ablations: &[String]) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    let variants = match command {
        Command::Ablate => plan(&cfg.ablation, ablations)?,
        _ => plan(&cfg.ablation, &[])?,
    };
    let checkpoint_in = match command {
        Command::Run => cfg.eval.checkpoint.clone(),
        _ => None,
    };
    if let Some(path) = &checkpoint_in {
        if !path.is_file() {
            return Err(Error::Config(format!("checkpoint {} not found", path.display())));
        }
    }
    let ds = build_dataset(cfg)?;
    if ds.test.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut timings = Timings::default();
    let (mut rows, mut traces, mut plots) = (Vec::new(), Vec::new(), Vec::new());
    let (mut parameters, mut checkpoint) = (0, None);
    for (i, v) in variants.iter().enumerate() {
        let mut vc = cfg.clone();
        vc.ablation = v.flags.clone();
        let label = if command == Command::Ablate { v.label.clone() } else { command.name().to_string() };
        log::info!("{label}: preparing windows");
        let t = Instant::now();
        let training = command != Command::Run;
        let tr = if training { prepare_windows(&vc, &ds.train)? } else { Vec::new() };
        let va = if training || vc.task == Task::Detect { prepare_windows(&vc, &ds.val)? } else { Vec::new() };
        let te = prepare_windows(&vc, &ds.test)?;
        timings.prepare_secs += t.elapsed().as_secs_f64();
        let mut model = build_model(&vc, &ds)?;
        parameters = model.store.num_scalars();
        if let Some(path) = &checkpoint_in {
            load_checkpoint(&mut model, path)?;
        }
        let t = Instant::now();
        let history = if training { Some(train(&mut model, &tr, &va, &vc.train_config())?) } else { None };
        timings.train_secs += t.elapsed().as_secs_f64();
        if command == Command::Train {
            let path = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&model, &path)?;
            checkpoint = Some(path);
        }
        let t = Instant::now();
        let (metrics, results) = evaluate(&model, &te, &va, vc.eval.threshold)?;
        timings.eval_secs += t.elapsed().as_secs_f64();
        if i == 0 {
            traces = te.iter().zip(&results).map(|(p, r)| WindowTrace::of(p, r)).collect();
            if cfg.eval.plots {
                plots.push(result_plot(&te[0], &results[0], vc.task, &cfg.plot)?.write_to(&dir)?);
            }
        }
        rows.push(Row { label, flags: v.flags.clone(), history, metrics });
    }
    let metrics_path = dir.join(METRICS_FILE);
    write_json(&metrics_path, &MetricsFile { command, task: cfg.task, seed: cfg.seed, rows: rows.clone() })?;
    timings.total_secs = start.elapsed().as_secs_f64();
    let mut report = RunReport {
        engine_version: ENGINE_VERSION.into(),
        command,
        config: cfg.clone(),
        dataset: ds.sizes(),
        parameters,
        checkpoint_loaded: checkpoint_in,
        rows,
        traces,
        timings,
        artifacts: Artifacts { metrics: metrics_path, summary: dir.join(SUMMARY_FILE), checkpoint, plots },
    };
    let summary = summary_text(&report);
    std::fs::write(&report.artifacts.summary, &summary).map_err(|e| Error::io(&report.artifacts.summary, e))?;
    report.timings.total_secs = start.elapsed().as_secs_f64();
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub split: String,
    pub start: usize,
    pub anchors: AnchorSet,
}

/// Oracle anchors for every window of every split, written to `anchors.json`.
pub fn dump_oracle_anchors(cfg: &RunConfig) -> Result<(PathBuf, Vec<AnchorRecord>)> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.anchors.source = AnchorSource::Offline;
    cfg.ablation.enable_visual_reasoner = true;
    let ds = build_dataset(&cfg)?;
    let mut records = Vec::new();
    for (split, windows) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for p in prepare_windows(&cfg, windows)? {
            records.push(AnchorRecord { split: split.into(), start: p.window.start, anchors: p.anchors });
        }
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(ANCHORS_FILE);
    write_json(&path, &records)?;
    Ok((path, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;

    fn tiny(task: Task, dir: &Path) -> RunConfig {
        let mut cfg = RunConfig { task, output_dir: dir.to_path_buf(), ..RunConfig::default() };
        cfg.data.synthetic = Some(SyntheticConfig { rows: 240, samples: 24, ..SyntheticConfig::default() });
        cfg.data.seq_len = 32;
        cfg.data.pred_len = 16;
        cfg.data.train_stride = 16;
        cfg.data.eval_stride = Some(16);
        let m = &mut cfg.model;
        (m.d_model, m.d_memory, m.hidden_dim, m.d_ff, m.n_heads, m.e_layers) = (8, 8, 8, 8, 2, 1);
        (m.patch_len, m.stride, m.moving_avg, m.router_hidden, m.vae_hidden, m.vae_latent) = (8, 4, 5, 8, 8, 4);
        cfg.train.epochs = Some(1);
        cfg
    }

    #[test]
    fn run_writes_referenced_files() {
        let tmp = tempfile::tempdir().unwrap();
        let report = execute(&tiny(Task::Forecast, tmp.path()), Command::Run, &[]).unwrap();
        assert!(report.artifacts.metrics.is_file());
        assert!(report.artifacts.summary.is_file());
        assert!(report.artifacts.plots.iter().all(|p| p.is_file()));
        assert_eq!(report.artifacts.plots.len(), 1);
        assert!(tmp.path().join(REPORT_FILE).is_file());
        assert!(report.rows[0].metrics.mse.is_some());
    }

    #[test]
    fn train_checkpoint_round_trips_into_run() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(Task::Forecast, &tmp.path().join("train"));
        let trained = execute(&cfg, Command::Train, &[]).unwrap();
        let ck = trained.artifacts.checkpoint.clone().unwrap();
        let mut eval = cfg.clone();
        eval.output_dir = tmp.path().join("eval");
        eval.eval.checkpoint = Some(ck);
        let report = execute(&eval, Command::Run, &[]).unwrap();
        assert_eq!(report.rows[0].metrics, trained.rows[0].metrics);
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Task::Forecast, tmp.path());
        cfg.eval.checkpoint = Some(tmp.path().join("absent.tsag"));
        assert!(matches!(execute(&cfg, Command::Run, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn impute_counts_masked_cells() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Task::Impute, tmp.path());
        cfg.data.mask_ratio = 0.25;
        let report = execute(&cfg, Command::Run, &[]).unwrap();
        let m = &report.rows[0].metrics;
        assert_eq!(m.masked_cells, Some(8 * m.windows));
    }

    #[test]
    fn ablation_rows_follow_the_plan() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(Task::Forecast, tmp.path());
        let report = execute(&cfg, Command::Ablate, &["enable_tools=false".into()]).unwrap();
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["baseline", "enable_tools=false"]);
    }

    #[test]
    fn oracle_dump_covers_every_split() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(Task::Forecast, tmp.path());
        let (path, records) = dump_oracle_anchors(&cfg).unwrap();
        assert!(path.is_file());
        assert!(["train", "val", "test"].iter().all(|s| records.iter().any(|r| r.split == *s)));
    }
}
