//! Deterministic rule-based line plots encoded as PNG.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::priors::PriorBundle;
use crate::error::{Error, Result};
use crate::TimeSeriesWindow;

const MARGIN: usize = 8;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const FRAME: [u8; 3] = [200, 200, 200];
pub const GAP_MARKER: [u8; 3] = [255, 170, 170];
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [148, 103, 189], [140, 86, 75], [23, 190, 207]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub width: usize,
    pub height: usize,
    /// Channels to draw; `None` draws the bundle's selected channels.
    pub channels: Option<Vec<usize>>,
    pub show_mask_markers: bool,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig { width: 512, height: 256, channels: None, show_mask_markers: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotImage {
    pub width: usize,
    pub height: usize,
    /// PNG-encoded RGB8 raster.
    pub encoding: Vec<u8>,
    pub channel_layout: Vec<usize>,
    pub value_axis_range: (f64, f64),
    steps: usize,
    pixels: Vec<u8>,
}

impl PlotImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Pixel column of time step `t`.
    pub fn column_of(&self, t: usize) -> usize {
        x_of(t, self.steps, self.width)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(&self.encoding))
    }

    pub fn base64(&self) -> String {
        use base64::Engine;
        base64::engine::general_purpose::STANDARD.encode(&self.encoding)
    }

    /// Write under `dir` with a content-hash filename; returns the path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("plot-{}.png", &self.content_hash()[..16]));
        std::fs::write(&path, &self.encoding).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn x_of(t: usize, steps: usize, width: usize) -> usize {
    let span = width - 2 * MARGIN - 1;
    if steps <= 1 {
        MARGIN
    } else {
        MARGIN + (t * span + (steps - 1) / 2) / (steps - 1)
    }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Line plot of the chosen channels over `t = 0..L−1`. Missing points break the line and,
/// with markers on, their pixel columns are shaded.
pub fn render_plot(window: &TimeSeriesWindow, bundle: &PriorBundle, cfg: &PlotConfig) -> Result<PlotImage> {
    let channels = cfg.channels.clone().unwrap_or_else(|| bundle.selected_channels.clone());
    if channels.is_empty() || channels.iter().any(|&c| c >= window.channels()) {
        return Err(Error::Contract(format!("invalid plot channels {channels:?}")));
    }
    let l = window.len();
    let width = cfg.width.max(l + 2 * MARGIN + 1);
    let height = cfg.height.max(2 * MARGIN + 16);
    let observed: Vec<f64> = channels.iter().flat_map(|&c| window.observed(c)).collect();
    let (lo, hi) = if observed.is_empty() {
        (-1.0, 1.0)
    } else {
        let (mn, mx) = (crate::stats::min(&observed), crate::stats::max(&observed));
        let pad = if mx > mn { 0.05 * (mx - mn) } else { 0.05 * mn.abs().max(1.0) };
        (mn - pad, mx + pad)
    };
    let mut cv = Canvas { w: width, h: height, px: BACKGROUND.repeat(width * height) };
    let (top, bottom) = (MARGIN as i64, (height - MARGIN - 1) as i64);
    let (left, right) = (MARGIN as i64, (width - MARGIN - 1) as i64);
    cv.line((left, top), (right, top), FRAME);
    cv.line((left, bottom), (right, bottom), FRAME);
    cv.line((left, top), (left, bottom), FRAME);
    cv.line((right, top), (right, bottom), FRAME);
    if cfg.show_mask_markers {
        if let Some(m) = &window.mask {
            for t in m.missing_steps() {
                let x = x_of(t, l, width) as i64;
                cv.line((x, top + 1), (x, bottom - 1), GAP_MARKER);
            }
        }
    }
    let y_of = |v: f64| -> i64 {
        let frac = (v - lo) / (hi - lo);
        bottom - (frac * (bottom - top) as f64).round() as i64
    };
    for (k, &c) in channels.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for t in 0..l {
            if !window.is_observed(t, c) {
                prev = None;
                continue;
            }
            let p = (x_of(t, l, width) as i64, y_of(window.get(t, c)));
            match prev {
                Some(q) => cv.line(q, p, color),
                None => cv.put(p.0, p.1, color),
            }
            prev = Some(p);
        }
    }
    let mut encoding = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut encoding, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Contract(format!("png header: {e}")))?;
        writer.write_image_data(&cv.px).map_err(|e| Error::Contract(format!("png data: {e}")))?;
    }
    Ok(PlotImage {
        width,
        height,
        encoding,
        channel_layout: channels,
        value_axis_range: (lo, hi),
        steps: l,
        pixels: cv.px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{compute_statistics, AnalyzerConfig};
    use crate::data::{apply_mask, Mask};

    fn sine_window() -> TimeSeriesWindow {
        let xs: Vec<f64> = (0..96).map(|t| (t as f64 * 0.5).sin()).collect();
        TimeSeriesWindow::from_series(&xs).unwrap()
    }

    fn render(w: &TimeSeriesWindow) -> PlotImage {
        let b = compute_statistics(w, &AnalyzerConfig::default(), (8, 15)).unwrap();
        render_plot(w, &b, &PlotConfig::default()).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let w = apply_mask(&sine_window(), 0.1, 4).unwrap();
        assert_eq!(render(&w).encoding, render(&w).encoding);
    }

    #[test]
    fn masked_step_gets_marker_column() {
        let mut w = sine_window();
        let mut m = Mask::empty(96, 1);
        m.set(25, 0, true);
        w.values.data_mut()[25] = 0.0;
        w.mask = Some(m);
        let img = render(&w);
        let x = img.column_of(25);
        assert!((0..img.height).any(|y| img.pixel(x, y) == GAP_MARKER));
    }

    #[test]
    fn width_covers_one_pixel_per_step() {
        let cfg = PlotConfig { width: 10, ..Default::default() };
        let w = sine_window();
        let b = compute_statistics(&w, &AnalyzerConfig::default(), (8, 15)).unwrap();
        let img = render_plot(&w, &b, &cfg).unwrap();
        assert!(img.width >= 96);
        let cols: std::collections::BTreeSet<usize> = (0..96).map(|t| img.column_of(t)).collect();
        assert_eq!(cols.len(), 96);
    }

    #[test]
    fn axis_range_pads_five_percent() {
        let img = render(&sine_window());
        let (lo, hi) = img.value_axis_range;
        let xs: Vec<f64> = (0..96).map(|t| (t as f64 * 0.5).sin()).collect();
        let (mn, mx) = (crate::stats::min(&xs), crate::stats::max(&xs));
        assert!((lo - (mn - 0.05 * (mx - mn))).abs() < 1e-12);
        assert!((hi - (mx + 0.05 * (mx - mn))).abs() < 1e-12);
    }
}
