//! Delimited-text ingestion, chronological splitting and window extraction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsagent_autodiff::Tensor;

use super::window::{Target, Task};
use super::TimeSeriesWindow;
use crate::error::{Error, Result};

/// Column layout of an input file. The first column is always the timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSpec {
    pub delimiter: char,
    /// Per-row label column (anomaly 0/1 flags or class names).
    pub label_column: Option<String>,
    /// Sample id column grouping rows into classification samples.
    pub id_column: Option<String>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec { delimiter: ',', label_column: None, id_column: None }
    }
}

/// Parsed file: value matrix plus optional label and id columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    /// rows × D values in file order.
    pub values: Tensor<f64>,
    pub labels: Option<Vec<String>>,
    pub ids: Option<Vec<String>>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn read_table(path: impl AsRef<Path>, spec: &ColumnSpec) -> Result<Table> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, spec)
}

/// Parse delimited text with a header row. Rows are 1-based counting the header as row 1;
/// columns are 1-based.
pub fn parse_table(text: &str, spec: &ColumnSpec) -> Result<Table> {
    if !spec.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} must be ASCII", spec.delimiter)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { row: 1, column: 0, detail: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &Option<String>| -> Result<Option<usize>> {
        match name {
            None => Ok(None),
            Some(n) => header
                .iter()
                .position(|h| h == n)
                .map(Some)
                .ok_or_else(|| Error::Parse { row: 1, column: 0, detail: format!("column `{n}` not found") }),
        }
    };
    let label_col = find(&spec.label_column)?;
    let id_col = find(&spec.id_column)?;
    let value_cols: Vec<usize> = (1..header.len()).filter(|&c| Some(c) != label_col && Some(c) != id_col).collect();
    if value_cols.is_empty() {
        return Err(Error::Parse { row: 1, column: 0, detail: "no value columns".into() });
    }
    let mut data = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    let mut ids = id_col.map(|_| Vec::new());
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, column: 0, detail: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(Error::Parse { row, column: 0, detail: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        for &c in &value_cols {
            let cell = &rec[c];
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse { row, column: c + 1, detail: format!("non-numeric cell `{cell}`") })?;
            data.push(v);
        }
        if let (Some(c), Some(l)) = (label_col, labels.as_mut()) {
            l.push(rec[c].to_string());
        }
        if let (Some(c), Some(l)) = (id_col, ids.as_mut()) {
            l.push(rec[c].to_string());
        }
        rows += 1;
    }
    let columns = value_cols.iter().map(|&c| header[c].clone()).collect();
    let values = if rows == 0 { Tensor::zeros(&[0, value_cols.len()]) } else { Tensor::new(&[rows, value_cols.len()], data)? };
    Ok(Table { columns, values, labels, ids })
}

/// Sliding windows of `seq_len` (+ `pred_len` target rows) with the given stride.
pub fn forecast_windows(series: &Tensor<f64>, seq_len: usize, pred_len: usize, stride: usize) -> Result<Vec<TimeSeriesWindow>> {
    let (rows, d) = (series.shape()[0], series.shape()[1]);
    let need = seq_len + pred_len;
    if seq_len == 0 || rows < need {
        return Err(Error::InsufficientData { needed: need.max(1), available: rows });
    }
    let stride = stride.max(1);
    let slice = |a: usize, b: usize| Tensor::new(&[b - a, d], series.data()[a * d..b * d].to_vec());
    let mut out = Vec::with_capacity((rows - need) / stride + 1);
    for s in (0..=rows - need).step_by(stride) {
        let mut w = TimeSeriesWindow::new(slice(s, s + seq_len)?)?;
        w.horizon = pred_len;
        if pred_len > 0 {
            w.target = Target::Forecast(slice(s + seq_len, s + need)?);
        }
        w.start = s;
        out.push(w);
    }
    Ok(out)
}

/// Windows of `seq_len` with per-step anomaly labels parsed from 0/1 strings.
pub fn anomaly_windows(series: &Tensor<f64>, labels: &[u8], seq_len: usize, stride: usize) -> Result<Vec<TimeSeriesWindow>> {
    let mut out = forecast_windows(series, seq_len, 0, stride)?;
    for w in &mut out {
        w.target = Target::Anomaly(labels[w.start..w.start + seq_len].to_vec());
    }
    Ok(out)
}

fn parse_flags(labels: &[String]) -> Result<Vec<u8>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "0" | "0.0" | "false" => Ok(0),
            "1" | "1.0" | "true" => Ok(1),
            other => Err(Error::Parse { row: i + 2, column: 0, detail: format!("anomaly label `{other}` is not 0/1") }),
        })
        .collect()
}

/// Class names in canonical order (numeric when every name parses as an integer).
pub fn class_names(labels: &[String]) -> Vec<String> {
    let mut names: Vec<String> = labels.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap_or(0));
    }
    names
}

/// One window per sample id, resampled to `seq_len` rows by truncation or last-row repetition.
pub fn classification_samples(table: &Table, seq_len: usize) -> Result<(Vec<TimeSeriesWindow>, Vec<String>)> {
    let labels = table
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("classification needs a label column".into()))?;
    let ids: Vec<String> = table.ids.clone().unwrap_or_else(|| vec!["0".to_string(); table.rows()]);
    let names = class_names(labels);
    let d = table.channels();
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (r, id) in ids.iter().enumerate() {
        groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        groups.get_mut(id).expect("inserted").push(r);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let rows = &groups[&id];
        let mut data = Vec::with_capacity(seq_len * d);
        for t in 0..seq_len {
            let r = rows[t.min(rows.len() - 1)];
            data.extend_from_slice(table.values.row(r));
        }
        let mut w = TimeSeriesWindow::new(Tensor::new(&[seq_len, d], data)?)?;
        let class = names.iter().position(|n| n == &labels[rows[0]]).expect("label present");
        w.target = Target::Class(class);
        w.start = rows[0];
        out.push(w);
    }
    Ok((out, names))
}

/// Load every window of a file for `task` with stride 1 (no splitting).
pub fn load_dataset(
    path: impl AsRef<Path>,
    spec: &ColumnSpec,
    task: Task,
    seq_len: usize,
    pred_len: usize,
) -> Result<Vec<TimeSeriesWindow>> {
    let table = read_table(path, spec)?;
    windows_for_task(&table, task, seq_len, pred_len, 1)
}

pub fn windows_for_task(table: &Table, task: Task, seq_len: usize, pred_len: usize, stride: usize) -> Result<Vec<TimeSeriesWindow>> {
    match task {
        Task::Forecast => forecast_windows(&table.values, seq_len, pred_len, stride),
        Task::Impute => forecast_windows(&table.values, seq_len, 0, stride),
        Task::Detect => {
            let labels = match &table.labels {
                Some(l) => parse_flags(l)?,
                None => vec![0; table.rows()],
            };
            anomaly_windows(&table.values, &labels, seq_len, stride)
        }
        Task::Classify => {
            if table.rows() == 0 {
                return Err(Error::InsufficientData { needed: 1, available: 0 });
            }
            Ok(classification_samples(table, seq_len)?.0)
        }
    }
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Row ranges for a series of `rows`; val and test reach back `context` rows so their
    /// first window has a full look-back.
    pub fn row_ranges(&self, rows: usize, context: usize) -> [std::ops::Range<usize>; 3] {
        let n_train = (rows as f64 * self.train).round() as usize;
        let n_val = (rows as f64 * self.val).round() as usize;
        let val_end = (n_train + n_val).min(rows);
        [0..n_train, n_train.saturating_sub(context)..val_end, val_end.saturating_sub(context)..rows]
    }

    /// Index ranges for `n` independent samples.
    pub fn sample_ranges(&self, n: usize) -> [std::ops::Range<usize>; 3] {
        let n_train = (n as f64 * self.train).round() as usize;
        let n_val = ((n as f64 * self.val).round() as usize).min(n - n_train.min(n));
        [0..n_train.min(n), n_train.min(n)..n_train.min(n) + n_val, n_train.min(n) + n_val..n]
    }
}

/// Rows `range` of a rows × D table.
pub fn slice_rows(table: &Table, range: std::ops::Range<usize>) -> Table {
    let d = table.channels();
    let values = Tensor::new(&[range.len(), d], table.values.data()[range.start * d..range.end * d].to_vec())
        .expect("slice within bounds");
    Table {
        columns: table.columns.clone(),
        values,
        labels: table.labels.as_ref().map(|l| l[range.clone()].to_vec()),
        ids: table.ids.as_ref().map(|l| l[range.clone()].to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: usize, cols: usize) -> String {
        let mut s = String::from("date");
        for c in 0..cols {
            s.push_str(&format!(",f{c}"));
        }
        s.push('\n');
        for r in 0..rows {
            s.push_str(&format!("2020-01-01 {r:04}"));
            for c in 0..cols {
                s.push_str(&format!(",{}", r * cols + c));
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn window_count_formula() {
        let t = parse_table(&csv(200, 7), &ColumnSpec::default()).unwrap();
        assert_eq!(t.channels(), 7);
        let w = forecast_windows(&t.values, 96, 96, 1).unwrap();
        assert_eq!(w.len(), 9);
        assert_eq!(w[0].channels(), 7);
        let Target::Forecast(y) = &w[8].target else { panic!() };
        assert_eq!(y.shape(), &[96, 7]);
        assert_eq!(y.data()[0], ((8 + 96) * 7) as f64);
    }

    #[test]
    fn header_only_is_insufficient() {
        let t = parse_table("date,a,b\n", &ColumnSpec::default()).unwrap();
        assert!(matches!(windows_for_task(&t, Task::Forecast, 4, 2, 1), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn non_numeric_cell_names_position() {
        let err = parse_table("date,a,b\nx,1,2\ny,3,oops\n", &ColumnSpec::default()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn classification_groups_by_id() {
        let text = "t,a,label,id\n0,1,cat,s1\n1,2,cat,s1\n0,5,dog,s2\n1,6,dog,s2\n2,7,dog,s2\n";
        let spec = ColumnSpec { label_column: Some("label".into()), id_column: Some("id".into()), ..Default::default() };
        let t = parse_table(text, &spec).unwrap();
        let (w, names) = classification_samples(&t, 3).unwrap();
        assert_eq!(names, vec!["cat", "dog"]);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].values.data(), &[1.0, 2.0, 2.0]);
        assert_eq!(w[1].target, Target::Class(1));
    }

    #[test]
    fn split_ranges_overlap_by_context() {
        let r = SplitRatios::default().row_ranges(1000, 96);
        assert_eq!(r[0], 0..700);
        assert_eq!(r[1], 604..800);
        assert_eq!(r[2], 704..1000);
        assert!(SplitRatios { train: 0.5, val: 0.5, test: 0.5 }.validate().is_err());
    }
}
