//! Split, standardized window sets built from a run configuration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsagent_autodiff::Tensor;

use super::loader::{class_names, classification_samples, read_table, slice_rows, windows_for_task, Table};
use super::mask::apply_mask;
use super::normalize::Standardizer;
use super::synth::{spike_positions, synth_classification, synth_multichannel, SynthKind};
use super::window::{Target, Task};
use crate::config::{RunConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::TimeSeriesWindow;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub train: Vec<TimeSeriesWindow>,
    pub val: Vec<TimeSeriesWindow>,
    pub test: Vec<TimeSeriesWindow>,
    pub columns: Vec<String>,
    pub class_names: Vec<String>,
    pub standardizer: Option<Standardizer>,
    /// Most frequent training class (classification only).
    pub majority_class: usize,
}

/// Split sizes recorded in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.columns.len()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { train: self.train.len(), val: self.val.len(), test: self.test.len() }
    }
}

fn synthetic_table(task: Task, s: &SyntheticConfig, seq_len: usize, seed: u64) -> Result<Table> {
    let columns: Vec<String> = (0..s.channels.max(1)).map(|c| format!("ch{c}")).collect();
    if task == Task::Classify {
        let (xs, ys) = synth_classification(s.samples, seq_len, s.channels.max(1), s.classes.max(1), seed);
        let d = columns.len();
        let mut data = Vec::with_capacity(s.samples * seq_len * d);
        let (mut labels, mut ids) = (Vec::new(), Vec::new());
        for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
            data.extend_from_slice(x.data());
            labels.extend(std::iter::repeat_n(y.to_string(), seq_len));
            ids.extend(std::iter::repeat_n(i.to_string(), seq_len));
        }
        let rows = labels.len();
        return Ok(Table { columns, values: Tensor::new(&[rows, d], data)?, labels: Some(labels), ids: Some(ids) });
    }
    let signal = match (&s.signal, s.spike_spacing) {
        (SynthKind::SpikeAnomaly { period, amplitude, magnitude, noise, .. }, Some(spacing)) => SynthKind::SpikeAnomaly {
            period: *period,
            amplitude: *amplitude,
            positions: spike_positions(s.rows, spacing, seed),
            magnitude: *magnitude,
            noise: *noise,
        },
        (k, _) => k.clone(),
    };
    let values = synth_multichannel(&signal, s.rows, columns.len(), seed);
    let labels = signal.labels(s.rows).map(|l| l.iter().map(|v| v.to_string()).collect());
    Ok(Table { columns, values, labels, ids: None })
}

fn standardized(table: &Table, st: &Standardizer) -> Table {
    Table { values: st.transform(&table.values), ..table.clone() }
}

fn mask_all(windows: &mut [TimeSeriesWindow], ratio: f64, seed: u64) -> Result<()> {
    if ratio <= 0.0 {
        return Ok(());
    }
    for (i, w) in windows.iter_mut().enumerate() {
        *w = apply_mask(w, ratio, seed.wrapping_add(i as u64))?;
    }
    Ok(())
}

/// Load or generate the configured series, split it chronologically (classification:
/// shuffled by the seed), standardize with training statistics and cut windows.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let task = cfg.task;
    let table = match (&d.path, &d.synthetic) {
        (Some(p), _) => read_table(p, &d.columns)?,
        (None, Some(s)) => synthetic_table(task, s, d.seq_len, cfg.seed)?,
        (None, None) => return Err(Error::Config("data.path or data.synthetic is required".into())),
    };
    if table.rows() == 0 {
        return Err(Error::InsufficientData { needed: d.seq_len, available: 0 });
    }
    if task == Task::Classify {
        return classification_dataset(cfg, &table);
    }
    let context = if task == Task::Forecast { d.seq_len } else { 0 };
    let [tr, va, te] = d.split.row_ranges(table.rows(), context);
    let standardizer = d.standardize.then(|| Standardizer::fit(&table.values, tr.end));
    let table = match &standardizer {
        Some(st) => standardized(&table, st),
        None => table,
    };
    let pred_len = if task == Task::Forecast { d.pred_len } else { 0 };
    let cut = |range: std::ops::Range<usize>, stride: usize| -> Vec<TimeSeriesWindow> {
        let part = slice_rows(&table, range);
        windows_for_task(&part, task, d.seq_len, pred_len, stride).unwrap_or_default()
    };
    let mut train = cut(tr.clone(), d.train_stride);
    let mut val = cut(va, cfg.eval_stride());
    let mut test = cut(te, cfg.eval_stride());
    if train.is_empty() && test.is_empty() {
        return Err(Error::InsufficientData { needed: d.seq_len + pred_len, available: tr.len() });
    }
    if task == Task::Impute {
        let base = cfg.seed.wrapping_mul(1_000_003);
        mask_all(&mut train, d.mask_ratio, base)?;
        mask_all(&mut val, d.mask_ratio, base.wrapping_add(1 << 32))?;
        mask_all(&mut test, d.mask_ratio, base.wrapping_add(2 << 32))?;
    }
    Ok(Dataset { task, train, val, test, columns: table.columns.clone(), class_names: Vec::new(), standardizer, majority_class: 0 })
}

fn classification_dataset(cfg: &RunConfig, table: &Table) -> Result<Dataset> {
    let (mut samples, _) = classification_samples(table, cfg.data.seq_len)?;
    let names = class_names(table.labels.as_deref().unwrap_or_default());
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let [tr, va, te] = cfg.data.split.sample_ranges(samples.len());
    let mut train: Vec<_> = samples[tr].to_vec();
    let mut val: Vec<_> = samples[va].to_vec();
    let mut test: Vec<_> = samples[te].to_vec();
    if train.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let standardizer = cfg.data.standardize.then(|| {
        let d = table.channels();
        let rows: Vec<f64> = train.iter().flat_map(|w| w.values.data().iter().copied()).collect();
        let n = rows.len() / d;
        Standardizer::fit(&Tensor::new(&[n, d], rows).expect("consistent shape"), n)
    });
    if let Some(st) = &standardizer {
        for w in train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()) {
            w.values = st.transform(&w.values);
        }
    }
    let mut counts = vec![0usize; names.len()];
    for w in &train {
        if let Target::Class(k) = w.target {
            counts[k] += 1;
        }
    }
    let majority_class = counts.iter().enumerate().fold(0, |b, (i, &c)| if c > counts[b] { i } else { b });
    Ok(Dataset {
        task: Task::Classify,
        train,
        val,
        test,
        columns: table.columns.clone(),
        class_names: names,
        standardizer,
        majority_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(task: Task) -> RunConfig {
        let mut c = RunConfig { task, ..RunConfig::default() };
        c.data.synthetic = Some(SyntheticConfig { rows: 400, ..SyntheticConfig::default() });
        c.data.seq_len = 48;
        c.data.pred_len = 24;
        c.data.train_stride = 8;
        c
    }

    #[test]
    fn forecast_splits_have_targets() {
        let ds = build_dataset(&cfg(Task::Forecast)).unwrap();
        assert!(!ds.train.is_empty() && !ds.val.is_empty() && !ds.test.is_empty());
        for w in ds.test.iter().chain(&ds.train) {
            assert!(matches!(&w.target, Target::Forecast(t) if t.shape() == [24, 1]));
        }
        let st = ds.standardizer.unwrap();
        assert_eq!(st.mean.len(), 1);
    }

    #[test]
    fn impute_mask_counts_are_exact() {
        let c = cfg(Task::Impute);
        let ds = build_dataset(&c).unwrap();
        let want = (0.25f64 * 48.0).round() as usize;
        assert!(ds.test.iter().all(|w| w.mask.as_ref().unwrap().count() == want));
    }

    #[test]
    fn classification_is_deterministic() {
        let mut c = cfg(Task::Classify);
        c.data.synthetic.as_mut().unwrap().samples = 40;
        let a = build_dataset(&c).unwrap();
        let b = build_dataset(&c).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.classes(), 4);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 40);
    }

    #[test]
    fn detection_eval_windows_do_not_overlap() {
        let mut c = cfg(Task::Detect);
        c.data.synthetic.as_mut().unwrap().signal =
            SynthKind::SpikeAnomaly { period: 24.0, amplitude: 1.0, positions: vec![], magnitude: 4.0, noise: 0.0 };
        c.data.synthetic.as_mut().unwrap().spike_spacing = Some(40);
        let ds = build_dataset(&c).unwrap();
        let starts: Vec<usize> = ds.test.iter().map(|w| w.start).collect();
        assert!(starts.windows(2).all(|p| p[1] - p[0] == 48));
        assert!(ds.test.iter().any(|w| matches!(&w.target, Target::Anomaly(l) if l.contains(&1))));
    }
}
