//! Static plots rendered straight into RGB buffers. Every image is written
//! together with a JSON file holding the data it was drawn from.

use std::fs;
use std::path::Path;

use dinomaly_core::data::{load_rgb, PreprocessSpec};
use dinomaly_core::metrics::{auroc, roc_curve};
use dinomaly_core::scoring::heatmap_image;
use dinomaly_core::seeding::stream;
use dinomaly_core::trainer::Prediction;
use dinomaly_core::{Error, Result};
use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

const CANVAS: u32 = 256;
const MARGIN: u32 = 16;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GUIDE: Rgb<u8> = Rgb([200, 200, 200]);
const CURVE: Rgb<u8> = Rgb([31, 119, 180]);
const NORMAL: Rgb<u8> = Rgb([44, 160, 44]);
const ANOMALOUS: Rgb<u8> = Rgb([214, 39, 40]);
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPlot {
    pub class_name: String,
    pub auroc: f64,
    /// `(fpr, tpr)` vertices in drawing order.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub class_name: String,
    /// `bins + 1` increasing edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPlot {
    pub class_name: String,
    /// Rows top to bottom: input, heatmap, ground truth.
    pub ids: Vec<String>,
}

pub fn roc_plot(class_name: &str, scores: &[f64], labels: &[bool]) -> Result<RocPlot> {
    Ok(RocPlot {
        class_name: class_name.to_string(),
        auroc: auroc(scores, labels)?,
        points: roc_curve(scores, labels)?,
    })
}

/// Equal-width bins over the observed score range.
pub fn score_histogram(class_name: &str, scores: &[f64], labels: &[bool], bins: usize) -> Result<Histogram> {
    if !labels.iter().any(|&l| l) {
        return Err(Error::input(format!(
            "class '{class_name}': score histogram needs at least one anomalous sample"
        )));
    }
    if !labels.iter().any(|&l| !l) {
        return Err(Error::input(format!(
            "class '{class_name}': score histogram needs at least one normal sample"
        )));
    }
    let bins = bins.max(1);
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::input(format!("class '{class_name}': scores must be finite")));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut normal = vec![0; bins];
    let mut anomalous = vec![0; bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if l {
            anomalous[b] += 1;
        } else {
            normal[b] += 1;
        }
    }
    Ok(Histogram {
        class_name: class_name.to_string(),
        edges,
        normal,
        anomalous,
    })
}

/// Seeded choice of `min(requested, available)` distinct samples, returned in
/// their original order.
pub fn choose_panel_samples(available: usize, requested: usize, seed: u64, salt: u64) -> Vec<usize> {
    let n = requested.min(available);
    let mut rng = stream(seed, &[0x706c_6f74, salt]);
    let mut picked = rand::seq::index::sample(&mut rng, available, n).into_vec();
    picked.sort_unstable();
    picked
}

fn to_px(v: f64, extent: u32) -> i64 {
    let span = (extent - 2 * MARGIN) as f64;
    (MARGIN as f64 + v.clamp(0.0, 1.0) * span).round() as i64
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line between two pixel positions.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

/// Plot-space `(x, y)` in `[0, 1]^2` to image pixels (y up).
fn plot_point(x: f64, y: f64) -> (i64, i64) {
    (to_px(x, CANVAS), CANVAS as i64 - 1 - to_px(y, CANVAS))
}

fn axes(img: &mut RgbImage) {
    line(img, plot_point(0.0, 0.0), plot_point(1.0, 0.0), AXIS);
    line(img, plot_point(0.0, 0.0), plot_point(0.0, 1.0), AXIS);
}

pub fn render_roc(plot: &RocPlot) -> RgbImage {
    let mut img = RgbImage::from_pixel(CANVAS, CANVAS, WHITE);
    line(&mut img, plot_point(0.0, 0.0), plot_point(1.0, 1.0), GUIDE);
    axes(&mut img);
    for w in plot.points.windows(2) {
        line(&mut img, plot_point(w[0].0, w[0].1), plot_point(w[1].0, w[1].1), CURVE);
    }
    img
}

pub fn render_histogram(h: &Histogram) -> RgbImage {
    let mut img = RgbImage::from_pixel(CANVAS, CANVAS, WHITE);
    axes(&mut img);
    let top = h.normal.iter().chain(&h.anomalous).copied().max().unwrap_or(1).max(1) as f64;
    let bins = h.normal.len() as f64;
    for (i, (&n, &a)) in h.normal.iter().zip(&h.anomalous).enumerate() {
        let x0 = i as f64 / bins;
        let mid = (i as f64 + 0.5) / bins;
        let x1 = (i as f64 + 1.0) / bins;
        for (count, (l, r), colour) in [(n, (x0, mid), NORMAL), (a, (mid, x1), ANOMALOUS)] {
            if count == 0 {
                continue;
            }
            let (px0, py_top) = plot_point(l, count as f64 / top);
            let (px1, py_base) = plot_point(r, 0.0);
            for x in px0..px1.max(px0 + 1) {
                for y in py_top..=py_base {
                    put(&mut img, x, y, colour);
                }
            }
        }
    }
    img
}

/// One row per prediction: the cropped input, its heatmap and the mask, each
/// at evaluation size.
pub fn render_panel(preds: &[&Prediction], preprocess: &PreprocessSpec) -> Result<RgbImage> {
    let Some(first) = preds.first() else {
        return Err(Error::input("a panel needs at least one sample"));
    };
    let (h, w) = first.map.shape();
    let mut img = RgbImage::from_pixel(3 * w as u32, (preds.len() * h) as u32, WHITE);
    for (row, p) in preds.iter().enumerate() {
        let y0 = (row * h) as i64;
        let src = load_rgb(&p.sample.image_path)?;
        let r = preprocess.resize_to as u32;
        let c = preprocess.center_crop_to as u32;
        let off = (r - c) / 2;
        let resized = imageops::resize(&src, r, r, imageops::FilterType::Triangle);
        let cropped = imageops::crop_imm(&resized, off, off, c, c).to_image();
        let input = imageops::resize(&cropped, w as u32, h as u32, imageops::FilterType::Triangle);
        imageops::replace(&mut img, &input, 0, y0);
        imageops::replace(&mut img, &heatmap_image(&p.map), w as i64, y0);
        let mask = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            if p.mask[[y as usize, x as usize]] {
                WHITE
            } else {
                Rgb([0, 0, 0])
            }
        });
        imageops::replace(&mut img, &mask, 2 * w as i64, y0);
    }
    Ok(img)
}

pub fn save_with_data<T: Serialize>(dir: &Path, stem: &str, img: &RgbImage, data: &T) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(format!("{stem}.png"));
    img.save(&png).map_err(|source| Error::Image { path: png, source })?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(data)?).map_err(|e| Error::io(&json, e))
}
