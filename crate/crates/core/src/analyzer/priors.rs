use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::channels::select_channels;
use super::plot::PlotImage;
use crate::error::{Error, Result};
use crate::spectral::{dominant_period, Periodicity};
use crate::{stats, TimeSeriesWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub last_value: f64,
}

impl ChannelStats {
    pub fn of(xs: &[f64]) -> Self {
        ChannelStats {
            min: stats::min(xs),
            max: stats::max(xs),
            mean: stats::mean(xs),
            std: stats::std(xs),
            last_value: xs.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticTag {
    Trending,
    Periodic,
    Stationary,
    Volatile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzerConfig {
    pub top_k_features: usize,
    /// `trending` iff |slope|·L exceeds this multiple of the std.
    pub trend_threshold: f64,
    /// `periodic` iff spectral strength exceeds this.
    pub periodic_threshold: f64,
    /// `volatile` iff std exceeds this multiple of IQR/1.349.
    pub volatile_factor: f64,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig { top_k_features: 10, trend_threshold: 0.5, periodic_threshold: 0.2, volatile_factor: 2.0 }
    }
}

/// Structured priors for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBundle {
    pub stats: Vec<ChannelStats>,
    pub trend_slope: Vec<f64>,
    pub periodicity: Option<Periodicity>,
    pub anchor_density_hint: f64,
    pub semantic_tags: BTreeSet<SemanticTag>,
    pub plot: Option<PlotImage>,
    pub selected_channels: Vec<usize>,
    /// Mean of the selected channels per step (gaps linearly filled); prompts, anchors and
    /// the anchor envelope all live on this series.
    pub reference: Vec<f64>,
    pub reference_stats: ChannelStats,
    pub reference_slope: f64,
    pub mask_ratio: f64,
}

impl PriorBundle {
    pub fn has_tag(&self, tag: SemanticTag) -> bool {
        self.semantic_tags.contains(&tag)
    }

    pub fn period(&self) -> Option<usize> {
        self.periodicity.map(|p| p.period)
    }

    pub fn strength(&self) -> f64 {
        self.periodicity.map_or(0.0, |p| p.strength)
    }
}

/// Linearly fill `None` gaps; leading/trailing gaps copy the nearest value.
pub(crate) fn fill_gaps(xs: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<usize> = (0..xs.len()).filter(|&i| xs[i].is_some()).collect();
    if known.is_empty() {
        return vec![0.0; xs.len()];
    }
    (0..xs.len())
        .map(|i| {
            if let Some(v) = xs[i] {
                return v;
            }
            let next = known.partition_point(|&k| k < i);
            match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
                (Some(a), Some(&b)) => {
                    let (va, vb) = (xs[a].unwrap_or(0.0), xs[b].unwrap_or(0.0));
                    va + (vb - va) * (i - a) as f64 / (b - a) as f64
                }
                (Some(a), None) => xs[a].unwrap_or(0.0),
                (None, Some(&b)) => xs[b].unwrap_or(0.0),
                (None, None) => 0.0,
            }
        })
        .collect()
}

/// Reference series: per-step mean over the observed cells of `channels`.
pub fn reference_series(window: &TimeSeriesWindow, channels: &[usize]) -> Vec<f64> {
    let raw: Vec<Option<f64>> = (0..window.len())
        .map(|t| {
            let obs: Vec<f64> = channels.iter().filter(|&&c| window.is_observed(t, c)).map(|&c| window.get(t, c)).collect();
            (!obs.is_empty()).then(|| stats::mean(&obs))
        })
        .collect();
    fill_gaps(&raw)
}

/// Statistics, channel selection, trend, periodicity and tags. `anchor_range` bounds the
/// density hint.
pub fn compute_statistics(
    window: &TimeSeriesWindow,
    cfg: &AnalyzerConfig,
    anchor_range: (usize, usize),
) -> Result<PriorBundle> {
    let l = window.len();
    let mut channel_stats = Vec::with_capacity(window.channels());
    let mut slopes = Vec::with_capacity(window.channels());
    for c in 0..window.channels() {
        let ts: Vec<f64> = (0..l).filter(|&t| window.is_observed(t, c)).map(|t| t as f64).collect();
        if ts.is_empty() {
            return Err(Error::ChannelEmpty(c));
        }
        let obs = window.observed(c);
        channel_stats.push(ChannelStats::of(&obs));
        slopes.push(stats::slope_at(&ts, &obs));
    }
    let selected = select_channels(window, cfg.top_k_features);
    let reference = reference_series(window, &selected);
    let reference_stats = ChannelStats::of(&reference);
    let reference_slope = stats::slope(&reference);
    let detrended: Vec<f64> = reference.iter().enumerate().map(|(t, &v)| v - reference_slope * t as f64).collect();
    let periodicity = dominant_period(&detrended);
    let strength = periodicity.map_or(0.0, |p| p.strength);

    let std = reference_stats.std;
    let mut tags = BTreeSet::new();
    let trending = reference_slope.abs() * l as f64 > cfg.trend_threshold * std;
    let volatile = std > cfg.volatile_factor * stats::iqr(&reference) / 1.349;
    if trending {
        tags.insert(SemanticTag::Trending);
    }
    if strength > cfg.periodic_threshold {
        tags.insert(SemanticTag::Periodic);
    }
    if volatile {
        tags.insert(SemanticTag::Volatile);
    }
    if !trending && !volatile {
        tags.insert(SemanticTag::Stationary);
    }
    let (lo, hi) = anchor_range;
    let hint = (2.0 + 10.0 * strength + 5.0 * reference_slope.abs()).clamp(lo as f64, hi.max(lo) as f64);
    Ok(PriorBundle {
        stats: channel_stats,
        trend_slope: slopes,
        periodicity,
        anchor_density_hint: hint,
        semantic_tags: tags,
        plot: None,
        selected_channels: selected,
        reference,
        reference_stats,
        reference_slope,
        mask_ratio: window.mask_ratio(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;

    fn bundle(xs: &[f64]) -> PriorBundle {
        compute_statistics(&TimeSeriesWindow::from_series(xs).unwrap(), &AnalyzerConfig::default(), (8, 15)).unwrap()
    }

    #[test]
    fn constant_series() {
        let b = bundle(&[5.0; 96]);
        assert_eq!(b.stats[0].mean, 5.0);
        assert_eq!(b.stats[0].std, 0.0);
        assert_eq!(b.trend_slope[0], 0.0);
        assert!(b.has_tag(SemanticTag::Stationary));
        assert!(b.periodicity.is_none());
    }

    #[test]
    fn sine_period_is_detected() {
        let xs: Vec<f64> = (0..96).map(|t| (std::f64::consts::TAU * t as f64 / 12.0).sin()).collect();
        let b = bundle(&xs);
        assert_eq!(b.period(), Some(12));
        assert!(b.has_tag(SemanticTag::Periodic));
    }

    #[test]
    fn ramp_is_trending() {
        let xs: Vec<f64> = (0..96).map(f64::from).collect();
        let b = bundle(&xs);
        assert!((b.trend_slope[0] - 1.0).abs() < 1e-9);
        assert!(b.has_tag(SemanticTag::Trending));
        assert_eq!(b.anchor_density_hint, 8.0);
    }

    #[test]
    fn all_masked_channel_is_named() {
        let mut w = TimeSeriesWindow::new(crate::Tensor::zeros(&[4, 2])).unwrap();
        let mut m = Mask::empty(4, 2);
        for t in 0..4 {
            m.set(t, 1, true);
        }
        w.mask = Some(m);
        assert!(matches!(compute_statistics(&w, &AnalyzerConfig::default(), (5, 7)), Err(Error::ChannelEmpty(1))));
    }

    #[test]
    fn gaps_fill_linearly() {
        assert_eq!(fill_gaps(&[None, Some(1.0), None, Some(3.0), None]), vec![1.0, 1.0, 2.0, 3.0, 3.0]);
    }
}
