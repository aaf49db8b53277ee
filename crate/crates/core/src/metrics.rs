//! Image- and pixel-level detection metrics and the per-class report.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative (true positive, false positive) counts after each distinct
/// threshold, scanning scores from high to low. A sample is predicted
/// positive when its score is at least the threshold.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<(Vec<(usize, usize)>, usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp, fp));
    }
    Ok((points, tp, fp))
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// threshold, equal to the Mann-Whitney statistic with ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (points, pos, neg) = sweep(scores, labels)?;
    if pos == 0 {
        return Err(Error::input("AUROC needs at least one positive (anomalous) sample"));
    }
    if neg == 0 {
        return Err(Error::input("AUROC needs at least one negative (normal) sample"));
    }
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for &(tp, fp) in &points {
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// ROC polyline `(fpr, tpr)` from `(0, 0)` through every distinct threshold
/// to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (points, pos, neg) = sweep(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::input("a ROC curve needs both normal and anomalous samples"));
    }
    let mut curve = Vec::with_capacity(points.len() + 1);
    curve.push((0.0, 0.0));
    curve.extend(points.iter().map(|&(tp, fp)| (fp as f64 / neg as f64, tp as f64 / pos as f64)));
    Ok(curve)
}

/// Step-interpolated average precision: sum of recall increments times the
/// precision at each threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (points, pos, _) = sweep(scores, labels)?;
    if pos == 0 {
        return Err(Error::input("average precision needs at least one positive sample"));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for &(tp, fp) in &points {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * tp as f64 / (tp + fp) as f64;
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// Best F1 over all distinct-score thresholds.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (points, pos, _) = sweep(scores, labels)?;
    if pos == 0 {
        return Err(Error::input("F1-max needs at least one positive sample"));
    }
    Ok(points
        .iter()
        .filter(|(tp, _)| *tp > 0)
        .map(|&(tp, fp)| 2.0 * tp as f64 / (pos + tp + fp) as f64)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuproConfig {
    pub fpr_limit: f64,
    pub connectivity: Connectivity,
}

impl Default for AuproConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Labels connected foreground regions `1..=count`; background is 0.
pub fn label_regions(mask: ArrayView2<'_, bool>, connectivity: Connectivity) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    let neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || labels[[i, j]] != 0 {
                continue;
            }
            count += 1;
            labels[[i, j]] = count;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                for &(dy, dx) in neighbours {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = count;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Area under the (FPR, mean per-region overlap) curve up to
/// `cfg.fpr_limit`, divided by the limit. Each ground-truth region weighs
/// equally regardless of its size; FPR pools the normal pixels of every map.
pub fn aupro(maps: &[ArrayView2<'_, f32>], masks: &[ArrayView2<'_, bool>], cfg: &AuproConfig) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::input(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    if !(cfg.fpr_limit > 0.0 && cfg.fpr_limit <= 1.0) {
        return Err(Error::config(format!("fpr limit must lie in (0, 1], got {}", cfg.fpr_limit)));
    }
    // per pixel: score and weight (region contribution, or None for normal)
    let mut scores = Vec::new();
    let mut region_of = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (k, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.dim() != mask.dim() {
            return Err(Error::input(format!(
                "map {k} has shape {:?} but its mask is {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        let (labels, count) = label_regions(*mask, cfg.connectivity);
        let offset = region_sizes.len();
        region_sizes.extend(std::iter::repeat(0).take(count));
        for (&s, &l) in map.iter().zip(labels.iter()) {
            if s.is_nan() {
                return Err(Error::input(format!("map {k} contains NaN")));
            }
            scores.push(s);
            if l == 0 {
                region_of.push(u32::MAX);
            } else {
                let r = offset + l as usize - 1;
                region_sizes[r] += 1;
                region_of.push(r as u32);
            }
        }
    }
    let regions = region_sizes.len();
    if regions == 0 {
        return Err(Error::input("AUPRO needs at least one anomalous pixel"));
    }
    let normals = region_of.iter().filter(|&&r| r == u32::MAX).count();
    if normals == 0 {
        return Err(Error::input("AUPRO needs at least one normal pixel"));
    }
    let weight: Vec<f64> = region_sizes.iter().map(|&n| 1.0 / (regions as f64 * n as f64)).collect();

    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
    let mut curve = vec![(0.0f64, 0.0f64)];
    let (mut fp, mut pro) = (0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i] as usize];
        while i < order.len() && scores[order[i] as usize] == s {
            match region_of[order[i] as usize] {
                u32::MAX => fp += 1,
                r => pro += weight[r as usize],
            }
            i += 1;
        }
        curve.push((fp as f64 / normals as f64, pro));
    }
    Ok(clipped_trapezoid(&curve, cfg.fpr_limit) / cfg.fpr_limit)
}

/// Trapezoidal area under a curve with nondecreasing x, truncated at
/// `x_max` with linear interpolation of the crossing segment.
pub fn clipped_trapezoid(points: &[(f64, f64)], x_max: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= x_max {
            break;
        }
        if x1 <= x_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0);
            area += (x_max - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

pub const METRIC_NAMES: [&str; 7] = ["I-AUROC", "I-AP", "I-F1max", "P-AUROC", "P-AP", "P-F1max", "P-AUPRO"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub i_auroc: f64,
    pub i_ap: f64,
    pub i_f1max: f64,
    pub p_auroc: f64,
    pub p_ap: f64,
    pub p_f1max: f64,
    pub p_aupro: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 7] {
        [
            self.i_auroc,
            self.i_ap,
            self.i_f1max,
            self.p_auroc,
            self.p_ap,
            self.p_f1max,
            self.p_aupro,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            i_auroc: v[0],
            i_ap: v[1],
            i_f1max: v[2],
            p_auroc: v[3],
            p_ap: v[4],
            p_f1max: v[5],
            p_aupro: v[6],
        }
    }
}

/// Everything needed to score one class.
pub struct ClassPredictions<'a> {
    pub image_scores: &'a [f64],
    pub labels: &'a [bool],
    pub maps: Vec<ArrayView2<'a, f32>>,
    pub masks: Vec<ArrayView2<'a, bool>>,
}

pub fn class_metrics(pred: &ClassPredictions<'_>, cfg: &AuproConfig) -> Result<MetricRow> {
    let pixel_scores: Vec<f64> = pred.maps.iter().flat_map(|m| m.iter().map(|&v| v as f64)).collect();
    let pixel_labels: Vec<bool> = pred.masks.iter().flat_map(|m| m.iter().copied()).collect();
    if pixel_scores.len() != pixel_labels.len() {
        return Err(Error::input("map and mask pixel counts differ"));
    }
    Ok(MetricRow {
        i_auroc: auroc(pred.image_scores, pred.labels)?,
        i_ap: average_precision(pred.image_scores, pred.labels)?,
        i_f1max: f1_max(pred.image_scores, pred.labels)?,
        p_auroc: auroc(&pixel_scores, &pixel_labels)?,
        p_ap: average_precision(&pixel_scores, &pixel_labels)?,
        p_f1max: f1_max(&pixel_scores, &pixel_labels)?,
        p_aupro: aupro(&pred.maps, &pred.masks, cfg)?,
    })
}

/// Per-class metric rows plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, MetricRow>,
    pub mean: MetricRow,
}

impl EvalReport {
    pub fn from_classes(per_class: BTreeMap<String, MetricRow>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::input("cannot build a report with no classes"));
        }
        let n = per_class.len() as f64;
        let mut sum = [0.0; 7];
        for row in per_class.values() {
            for (s, v) in sum.iter_mut().zip(row.values()) {
                *s += v;
            }
        }
        let mean = MetricRow::from_values(sum.map(|s| s / n));
        Ok(Self { per_class, mean })
    }

    /// Largest absolute difference over every class and metric. Reports with
    /// different class sets compare as infinitely far apart.
    pub fn max_abs_diff(&self, other: &EvalReport) -> f64 {
        if self.per_class.keys().ne(other.per_class.keys()) {
            return f64::INFINITY;
        }
        self.per_class
            .values()
            .zip(other.per_class.values())
            .chain(std::iter::once((&self.mean, &other.mean)))
            .flat_map(|(a, b)| a.values().into_iter().zip(b.values()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class"];
        header.extend(METRIC_NAMES);
        w.write_record(&header)?;
        let rows = self
            .per_class
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("mean", &self.mean)));
        for (name, row) in rows {
            let mut rec = vec![name.to_string()];
            rec.extend(row.values().iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut classes = serde_json::Map::new();
        for (name, row) in &self.per_class {
            classes.insert(name.clone(), row_json(row));
        }
        let doc = serde_json::json!({
            "columns": METRIC_NAMES,
            "per_class": classes,
            "mean": row_json(&self.mean),
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv_string()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, self.to_json_string()?).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        let parse_row = |v: &serde_json::Value| -> Result<MetricRow> {
            let mut out = [0.0; 7];
            for (slot, name) in out.iter_mut().zip(METRIC_NAMES) {
                *slot = v
                    .get(name)
                    .and_then(|x| x.as_f64())
                    .ok_or_else(|| Error::data_at(path, format!("missing metric {name}")))?;
            }
            Ok(MetricRow::from_values(out))
        };
        let classes = doc
            .get("per_class")
            .and_then(|c| c.as_object())
            .ok_or_else(|| Error::data_at(path, "missing per_class"))?;
        let mut per_class = BTreeMap::new();
        for (name, row) in classes {
            per_class.insert(name.clone(), parse_row(row)?);
        }
        let mean = parse_row(doc.get("mean").ok_or_else(|| Error::data_at(path, "missing mean"))?)?;
        Ok(Self { per_class, mean })
    }
}

fn row_json(row: &MetricRow) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (name, v) in METRIC_NAMES.iter().zip(row.values()) {
        m.insert(name.to_string(), serde_json::json!(v));
    }
    serde_json::Value::Object(m)
}
