//! Seeded synthetic inspection benchmark written in MVTec layout.
//!
//! Each class is a texture family: an oriented sinusoidal grating blended
//! between two class colours plus a field of soft blobs. Anomalous test
//! images carry 1-3 defects (rectangle, ellipse or scratch) filled with a
//! colour shift or an inverted texture. Masks are the exact union of the
//! defect rasters, and every defect spec is stored in `manifest.json`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::stream;
use crate::error::{Error, Result};

pub const MIN_DEFECT_FRACTION: f64 = 0.005;
pub const MAX_DEFECT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Share of each class's test images that are anomalous.
    pub anomalous_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 100,
            test_per_class: 40,
            image_size: 112,
            seed: 0,
            anomalous_fraction: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synthetic dataset sizes must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config("synthetic images must be at least 16 pixels wide"));
        }
        if !(0.0..=1.0).contains(&self.anomalous_fraction) {
            return Err(Error::config("anomalous fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    fn anomalous_count(&self) -> usize {
        ((self.test_per_class as f64 * self.anomalous_fraction).round() as usize).min(self.test_per_class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum DefectShape {
    /// Pixels whose centre lies in `[x0, x1) x [y0, y1)`.
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Axis-aligned ellipse, boundary inclusive.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Pixels whose centre is within `half_width` of the segment.
    Scratch {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        half_width: f64,
    },
}

impl DefectShape {
    pub fn kind(&self) -> &'static str {
        match self {
            DefectShape::Rectangle { .. } => "rectangle",
            DefectShape::Ellipse { .. } => "ellipse",
            DefectShape::Scratch { .. } => "scratch",
        }
    }

    /// Whether the pixel centre `(px, py)` is covered.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            DefectShape::Rectangle { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            DefectShape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            DefectShape::Scratch {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (x0 + t * vx - px, y0 + t * vy - py);
                qx * qx + qy * qy <= half_width * half_width
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fill", rename_all = "snake_case")]
pub enum DefectFill {
    ColorShift { delta: [i16; 3] },
    Invert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    #[serde(flatten)]
    pub shape: DefectShape,
    pub paint: DefectFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEntry {
    pub id: String,
    pub defects: Vec<DefectSpec>,
    pub mask_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub classes: Vec<String>,
    pub anomalies: Vec<AnomalyEntry>,
}

/// Union of the defect rasters on a `size x size` grid.
pub fn rasterize(defects: &[DefectSpec], size: usize) -> Array2<bool> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        defects.iter().any(|d| d.shape.contains(px, py))
    })
}


#[derive(Debug, Clone)]
struct Texture {
    colors: [[f64; 3]; 3],
    frequency: f64,
    orientation: f64,
    blob_count: usize,
    blob_radius: f64,
}

impl Texture {
    fn for_class(seed: u64, class: usize, classes: usize) -> Self {
        let mut rng = stream(seed, &[1, class as u64]);
        // spread class hues around the colour wheel
        let hue = (class as f64 + rng.random_range(0.0..0.3)) / classes as f64;
        let colors = [
            hsv(hue, 0.55, 0.85),
            hsv(hue + 0.08, 0.7, 0.35),
            hsv(hue + 0.5, 0.35, 0.6),
        ];
        Self {
            colors,
            frequency: rng.random_range(3.0..7.0),
            orientation: rng.random_range(0.0..PI),
            blob_count: rng.random_range(3..7),
            blob_radius: rng.random_range(0.06..0.12),
        }
    }

    fn render(&self, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        let s = size as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let theta = self.orientation + rng.random_range(-0.1..0.1);
        let (ct, st) = (theta.cos(), theta.sin());
        let blobs: Vec<(f64, f64, f64)> = (0..self.blob_count)
            .map(|_| {
                (
                    rng.random_range(0.0..s),
                    rng.random_range(0.0..s),
                    self.blob_radius * s * rng.random_range(0.8..1.25),
                )
            })
            .collect();
        let mut img = RgbImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let v = 0.5 + 0.5 * (2.0 * PI * self.frequency * (px * ct + py * st) / s + phase).sin();
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = self.colors[0][c] * (1.0 - v) + self.colors[1][c] * v;
                }
                let alpha = blobs
                    .iter()
                    .map(|&(bx, by, r)| (-((px - bx).powi(2) + (py - by).powi(2)) / (2.0 * r * r)).exp())
                    .fold(0.0, f64::max)
                    * 0.6;
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - alpha) + self.colors[2][c] * alpha;
                    rgb[c] += rng.random_range(-4.0..4.0) / 255.0;
                }
                img.put_pixel(x as u32, y as u32, Rgb(rgb.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)));
            }
        }
        img
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: f64, area: f64) -> DefectShape {
    let margin = 0.05 * size;
    match rng.random_range(0..3) {
        0 => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let w = (area * aspect).sqrt().min(size - 2.0 * margin);
            let h = (area / w).min(size - 2.0 * margin);
            let x0 = rng.random_range(margin..size - margin - w);
            let y0 = rng.random_range(margin..size - margin - h);
            DefectShape::Rectangle {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        }
        1 => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rx = (area * aspect / PI).sqrt().min(size / 2.0 - margin);
            let ry = (area / (PI * rx)).min(size / 2.0 - margin);
            DefectShape::Ellipse {
                cx: rng.random_range(margin + rx..size - margin - rx),
                cy: rng.random_range(margin + ry..size - margin - ry),
                rx,
                ry,
            }
        }
        _ => {
            let len = rng.random_range(0.3..0.6) * size;
            let half_width = (area / (2.0 * len)).max(1.0);
            let angle = rng.random_range(0.0..PI);
            let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
            let lo = margin + dx.abs().max(dy.abs());
            let cx = rng.random_range(lo..size - lo);
            let cy = rng.random_range(lo..size - lo);
            DefectShape::Scratch {
                x0: cx - dx,
                y0: cy - dy,
                x1: cx + dx,
                y1: cy + dy,
                half_width,
            }
        }
    }
}

fn random_fill(rng: &mut ChaCha8Rng) -> DefectFill {
    if rng.random_bool(0.4) {
        DefectFill::Invert
    } else {
        let mut delta = [0i16; 3];
        for d in &mut delta {
            let mag = rng.random_range(70..130);
            *d = if rng.random_bool(0.5) { mag } else { -mag };
        }
        DefectFill::ColorShift { delta }
    }
}

/// Draws 1-3 defects whose union covers a fraction of the image inside
/// `[MIN_DEFECT_FRACTION, MAX_DEFECT_FRACTION]`; draws are repeated until
/// the rasterized union satisfies the bound.
pub fn sample_defects(rng: &mut ChaCha8Rng, size: usize) -> (Vec<DefectSpec>, Array2<bool>) {
    let total = (size * size) as f64;
    loop {
        let count = rng.random_range(1..=3usize);
        let target = rng.random_range(0.015..0.07) * total;
        let defects: Vec<DefectSpec> = (0..count)
            .map(|_| DefectSpec {
                shape: random_shape(rng, size as f64, target / count as f64),
                paint: random_fill(rng),
            })
            .collect();
        let mask = rasterize(&defects, size);
        let frac = mask.iter().filter(|&&b| b).count() as f64 / total;
        if (MIN_DEFECT_FRACTION..=MAX_DEFECT_FRACTION).contains(&frac) {
            return (defects, mask);
        }
    }
}

/// Paints the defects in order; later defects draw over earlier ones.
pub fn apply_defects(img: &mut RgbImage, defects: &[DefectSpec]) {
    let (w, h) = img.dimensions();
    for d in defects {
        for y in 0..h {
            for x in 0..w {
                if !d.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                let p = img.get_pixel_mut(x, y);
                for c in 0..3 {
                    p[c] = match d.paint {
                        DefectFill::Invert => 255 - p[c],
                        DefectFill::ColorShift { delta } => (p[c] as i16 + delta[c]).clamp(0, 255) as u8,
                    };
                }
            }
        }
    }
}

pub fn class_name(index: usize) -> String {
    format!("texture_{index:02}")
}

fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the dataset under `root` and returns its manifest. Output is a
/// pure function of `spec`.
pub fn synth_dataset(spec: &SynthSpec, root: &Path) -> Result<SynthManifest> {
    spec.validate()?;
    let size = spec.image_size;
    let mut classes = Vec::new();
    let mut anomalies = Vec::new();
    for c in 0..spec.classes {
        let name = class_name(c);
        let texture = Texture::for_class(spec.seed, c, spec.classes);
        let dir = root.join(&name);
        for i in 0..spec.train_per_class {
            let mut rng = stream(spec.seed, &[2, c as u64, 0, i as u64]);
            let img = texture.render(size, &mut rng);
            save_png(&img.into(), &dir.join(format!("train/good/{i:03}.png")))?;
        }
        let bad = spec.anomalous_count();
        let good = spec.test_per_class - bad;
        for i in 0..spec.test_per_class {
            let mut rng = stream(spec.seed, &[2, c as u64, 1, i as u64]);
            let mut img = texture.render(size, &mut rng);
            if i < good {
                save_png(&img.into(), &dir.join(format!("test/good/{i:03}.png")))?;
                continue;
            }
            let (defects, mask) = sample_defects(&mut rng, size);
            apply_defects(&mut img, &defects);
            let kind = defects[0].shape.kind();
            save_png(&img.into(), &dir.join(format!("test/{kind}/{i:03}.png")))?;
            let gray = GrayImage::from_fn(size as u32, size as u32, |x, y| {
                Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
            });
            save_png(&gray.into(), &dir.join(format!("ground_truth/{kind}/{i:03}_mask.png")))?;
            anomalies.push(AnomalyEntry {
                id: format!("{name}/test/{kind}/{i:03}"),
                mask_pixels: mask.iter().filter(|&&b| b).count(),
                defects,
            });
        }
        classes.push(name);
    }
    let manifest = SynthManifest {
        spec: *spec,
        classes,
        anomalies,
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<SynthManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::data::dataset::load_mvtec_layout;

    fn small() -> SynthSpec {
        SynthSpec {
            classes: 2,
            train_per_class: 3,
            test_per_class: 4,
            image_size: 48,
            seed: 9,
            anomalous_fraction: 0.5,
        }
    }

    fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(&small(), a.path()).unwrap();
        synth_dataset(&small(), b.path()).unwrap();
        assert_eq!(snapshot(a.path()), snapshot(b.path()));
        let c = tempfile::tempdir().unwrap();
        synth_dataset(&SynthSpec { seed: 10, ..small() }, c.path()).unwrap();
        assert_ne!(snapshot(a.path()), snapshot(c.path()));
    }

    #[test]
    fn layout_loads_with_expected_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&small(), dir.path()).unwrap();
        let idx = load_mvtec_layout(dir.path()).unwrap();
        assert_eq!(idx.classes, m.classes);
        assert_eq!(idx.records.len(), 2 * (3 + 4));
        assert_eq!(idx.records.iter().filter(|r| r.is_anomalous()).count(), 4);
        assert_eq!(m.anomalies.len(), 4);
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sampled_defects_respect_area_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (defects, mask) = sample_defects(&mut rng, 112);
            assert!((1..=3).contains(&defects.len()));
            let frac = mask.iter().filter(|&&b| b).count() as f64 / (112.0 * 112.0);
            assert!((MIN_DEFECT_FRACTION..=MAX_DEFECT_FRACTION).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn shape_predicates() {
        let r = DefectShape::Rectangle {
            x0: 1.0,
            y0: 1.0,
            x1: 3.0,
            y1: 2.0,
        };
        assert!(r.contains(1.5, 1.5) && r.contains(2.5, 1.5) && !r.contains(3.5, 1.5) && !r.contains(1.5, 2.5));
        let e = DefectShape::Ellipse {
            cx: 5.0,
            cy: 5.0,
            rx: 2.0,
            ry: 1.0,
        };
        assert!(e.contains(7.0, 5.0) && !e.contains(5.0, 6.5));
        let s = DefectShape::Scratch {
            x0: 0.0,
            y0: 0.0,
            x1: 10.0,
            y1: 0.0,
            half_width: 1.0,
        };
        assert!(s.contains(5.0, 0.9) && !s.contains(5.0, 1.1) && !s.contains(11.5, 0.0));
    }
}
