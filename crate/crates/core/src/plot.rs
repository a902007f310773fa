//! Two-panel sweep figure (task error and r̄² against D_ex), drawn
//! directly into a PNG. The image depends only on the sweep rows.
//!
//! Left panel: test task error. Right panel: r̄². Both y axes span
//! `[0, 1]` with ticks every 0.25; x ticks mark each swept D_ex value,
//! increasing to the right. Red is CBM, blue the augmented model; markers
//! are seed means and whiskers span ±2σ.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::config::ModelKind;
use crate::error::{CoreError, Result};
use crate::evaluation::{summarize_sweep, SweepRow};

const PANEL_W: u32 = 320;
const HEIGHT: u32 = 280;
const MARGIN: u32 = 30;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([215, 215, 215]);

fn color(model: ModelKind) -> Rgb<u8> {
    match model {
        ModelKind::Cbm => Rgb([210, 40, 40]),
        _ => Rgb([40, 80, 210]),
    }
}

struct Panel {
    x0: u32,
    d_min: f64,
    d_max: f64,
}

impl Panel {
    fn px(&self, d: f64) -> f64 {
        let span = (self.d_max - self.d_min).max(1.0);
        let left = (self.x0 + MARGIN) as f64 + 10.0;
        let right = (self.x0 + PANEL_W - MARGIN / 2) as f64 - 10.0;
        if self.d_max == self.d_min {
            return (left + right) / 2.0;
        }
        left + (d - self.d_min) / span * (right - left)
    }

    fn py(&self, v: f64) -> f64 {
        let top = (MARGIN / 2) as f64;
        let bottom = (HEIGHT - MARGIN) as f64;
        bottom - v.clamp(0.0, 1.0) * (bottom - top)
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), c);
    }
}

fn marker(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx as f64, y + dy as f64, c);
        }
    }
}

/// Renders the figure; errors on empty input.
pub fn sweep_plot(rows: &[SweepRow]) -> Result<RgbImage> {
    if rows.is_empty() {
        return Err(CoreError::Invalid("no sweep rows to plot".into()));
    }
    let mut summary = summarize_sweep(rows);
    summary.sort_by_key(|s| (s.model != ModelKind::Cbm, s.d_ex));
    let d_min = rows.iter().map(|r| r.d_ex).min().unwrap_or(0) as f64;
    let d_max = rows.iter().map(|r| r.d_ex).max().unwrap_or(0) as f64;
    let mut d_values: Vec<usize> = rows.iter().map(|r| r.d_ex).collect();
    d_values.sort_unstable();
    d_values.dedup();

    let mut img = RgbImage::from_pixel(2 * PANEL_W, HEIGHT, WHITE);
    for p in 0..2u32 {
        let panel = Panel {
            x0: p * PANEL_W,
            d_min,
            d_max,
        };
        let left = (panel.x0 + MARGIN) as f64;
        let right = (panel.x0 + PANEL_W - MARGIN / 2) as f64;
        for q in 0..=4 {
            let y = panel.py(q as f64 / 4.0);
            line(&mut img, (left, y), (right, y), GREY);
            line(&mut img, (left - 4.0, y), (left, y), BLACK);
        }
        let bottom = panel.py(0.0);
        line(&mut img, (left, panel.py(1.0)), (left, bottom), BLACK);
        line(&mut img, (left, bottom), (right, bottom), BLACK);
        for &d in &d_values {
            let x = panel.px(d as f64);
            line(&mut img, (x, bottom), (x, bottom + 4.0), BLACK);
        }

        for model in [ModelKind::Cbm, ModelKind::Cbmauc] {
            let c = color(model);
            let pts: Vec<(f64, f64, f64)> = summary
                .iter()
                .filter(|s| s.model == model)
                .map(|s| {
                    let (m, two) = if p == 0 { s.task_error } else { s.r_bar_sq };
                    (panel.px(s.d_ex as f64), m, two)
                })
                .collect();
            for w in pts.windows(2) {
                line(&mut img, (w[0].0, panel.py(w[0].1)), (w[1].0, panel.py(w[1].1)), c);
            }
            for &(x, m, two) in &pts {
                line(&mut img, (x, panel.py(m - two)), (x, panel.py(m + two)), c);
                line(&mut img, (x - 3.0, panel.py(m - two)), (x + 3.0, panel.py(m - two)), c);
                line(&mut img, (x - 3.0, panel.py(m + two)), (x + 3.0, panel.py(m + two)), c);
                marker(&mut img, x, panel.py(m), c);
            }
        }
    }
    Ok(img)
}

pub fn write_sweep_plot(rows: &[SweepRow], path: &Path) -> Result<()> {
    sweep_plot(rows)?
        .save(path)
        .map_err(|e| CoreError::format(path, e.to_string()))
}
