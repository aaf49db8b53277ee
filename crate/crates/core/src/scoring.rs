//! Anomaly maps and image-level scores.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::framed::{read_framed, write_framed};
use crate::model::GroupedFeatures;
use crate::objective::point_distances;
use crate::resample::resize_bilinear;
use crate::tensor::Real;

pub const DEFAULT_EVAL_SIZE: (usize, usize) = (256, 256);
pub const DEFAULT_TOP_FRACTION: f64 = 0.01;

/// Per-pixel cosine distance at evaluation resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub values: Array2<f32>,
    pub source_grid: (usize, usize),
}

impl AnomalyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub sample: SampleRecord,
    pub map: AnomalyMap,
    pub image_score: f64,
}

/// One map per image in the batch: per-token cosine distance averaged over
/// groups, then bilinearly upsampled to `eval_size`.
pub fn anomaly_map<F: Real>(groups: &GroupedFeatures<F>, eval_size: (usize, usize)) -> Result<Vec<AnomalyMap>> {
    if groups.noise_active {
        return Err(Error::config("anomaly maps require an eval-mode (noise-free) forward pass"));
    }
    if groups.pairs.is_empty() {
        return Err(Error::config("no feature groups to score"));
    }
    if eval_size.0 == 0 || eval_size.1 == 0 {
        return Err(Error::config("evaluation size must be positive"));
    }
    let (first, _) = &groups.pairs[0];
    let (b, gh, gw) = (first.batch(), first.grid_h(), first.grid_w());
    let mut acc = Array2::<f64>::zeros((b, gh * gw));
    for (e, d) in &groups.pairs {
        let dist = point_distances(e.data(), d.data());
        acc.zip_mut_with(&dist, |a, &v| *a += v.to_f64().unwrap());
    }
    acc /= groups.pairs.len() as f64;
    let maps = acc
        .axis_iter(Axis(0))
        .map(|row| {
            let grid = row.to_owned().into_shape_with_order((gh, gw)).expect("row has gh*gw tokens");
            let up = resize_bilinear(grid.view(), eval_size.0, eval_size.1);
            AnomalyMap {
                values: up.mapv(|v| v as f32),
                source_grid: (gh, gw),
            }
        })
        .collect();
    Ok(maps)
}

/// Mean of the `ceil(top_fraction * pixels)` largest map values.
pub fn image_score(map: &AnomalyMap, top_fraction: f64) -> f64 {
    let mut v: Vec<f32> = map.values.iter().copied().collect();
    top_mean(&mut v, top_fraction)
}

fn top_mean(v: &mut [f32], top_fraction: f64) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    let k = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
    v.select_nth_unstable_by(n - k, |a, b| a.total_cmp(b));
    v[n - k..].iter().map(|&x| x as f64).sum::<f64>() / k as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct MapHeader {
    kind: String,
    shape: [usize; 2],
    source_grid: [usize; 2],
    dtype: String,
}

pub fn write_map(path: &Path, map: &AnomalyMap) -> Result<()> {
    let (h, w) = map.shape();
    let header = MapHeader {
        kind: "anomaly_map".into(),
        shape: [h, w],
        source_grid: [map.source_grid.0, map.source_grid.1],
        dtype: "f32le".into(),
    };
    let payload: Vec<f32> = map.values.iter().copied().collect();
    write_framed(path, &header, &payload)
}

pub fn read_map(path: &Path) -> Result<AnomalyMap> {
    let (header, payload): (MapHeader, _) = read_framed(path)?;
    if header.kind != "anomaly_map" || header.dtype != "f32le" {
        return Err(Error::data_at(path, format!("expected an f32 anomaly map, found {}", header.kind)));
    }
    let values = Array2::from_shape_vec((header.shape[0], header.shape[1]), payload)
        .map_err(|e| Error::data_at(path, e.to_string()))?;
    Ok(AnomalyMap {
        values,
        source_grid: (header.source_grid[0], header.source_grid[1]),
    })
}

/// Upper end of the heatmap colour ramp; distances live in `[0, 2]`.
pub const HEATMAP_MAX: f32 = 2.0;

/// Viridis control points, evenly spaced over the ramp.
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

pub fn colorize(value: f32) -> [u8; 3] {
    let t = if value.is_finite() { (value / HEATMAP_MAX).clamp(0.0, 1.0) } else { 1.0 };
    let pos = t * (VIRIDIS.len() - 1) as f32;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let a = VIRIDIS[i][c] as f32;
        let b = VIRIDIS[i + 1][c] as f32;
        out[c] = (a + (b - a) * f).round() as u8;
    }
    out
}

pub fn heatmap_image(map: &AnomalyMap) -> image::RgbImage {
    let (h, w) = map.shape();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(colorize(map.values[[y as usize, x as usize]])))
}

pub fn write_heatmap(path: &Path, map: &AnomalyMap) -> Result<()> {
    heatmap_image(map).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GridShape, TokenGrid};
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn grid_from(values: Array3<f64>, h: usize, w: usize) -> TokenGrid<f64> {
        TokenGrid::new(values, h, w).unwrap()
    }

    /// Encoder tokens along x; decoder tokens rotated so each token's
    /// cosine distance is `dist`.
    fn pair_with_distance(dist: f64, shape: GridShape) -> (TokenGrid<f64>, TokenGrid<f64>) {
        let cos = 1.0 - dist;
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let e = Array3::from_shape_fn((shape.batch, shape.tokens(), 2), |(_, _, c)| [1.0, 0.0][c]);
        let d = Array3::from_shape_fn((shape.batch, shape.tokens(), 2), |(_, _, c)| [cos, sin][c]);
        (grid_from(e, shape.grid_h, shape.grid_w), grid_from(d, shape.grid_h, shape.grid_w))
    }

    #[test]
    fn perfect_reconstruction_gives_zero_map() {
        let shape = GridShape::new(2, 3, 3);
        let (e, _) = pair_with_distance(0.0, shape);
        let g = GroupedFeatures::new(vec![(e.clone(), e)]).unwrap();
        let maps = anomaly_map(&g, (12, 12)).unwrap();
        assert_eq!(maps.len(), 2);
        assert!(maps.iter().all(|m| m.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn groups_are_averaged() {
        let shape = GridShape::new(1, 2, 2);
        let g = GroupedFeatures::new(vec![pair_with_distance(0.2, shape), pair_with_distance(0.6, shape)]).unwrap();
        let maps = anomaly_map(&g, (8, 8)).unwrap();
        assert!(maps[0].values.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn noisy_groups_are_rejected() {
        let shape = GridShape::new(1, 2, 2);
        let mut g = GroupedFeatures::new(vec![pair_with_distance(0.2, shape)]).unwrap();
        g.noise_active = true;
        assert!(matches!(anomaly_map(&g, (4, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn upsampling_matches_direct_bilinear_formula() {
        // per-token distances 0, 0.5, 1, 1.5 on a 2x2 grid
        let e = Array3::from_shape_fn((1, 4, 2), |(_, _, c)| [1.0, 0.0][c]);
        let angles = [0.0f64, 0.5, 1.0, 1.5].map(|d| (1.0 - d).acos());
        let d = Array3::from_shape_fn((1, 4, 2), |(_, t, c)| [angles[t].cos(), angles[t].sin()][c]);
        let g = GroupedFeatures::new(vec![(grid_from(e, 2, 2), grid_from(d, 2, 2))]).unwrap();
        let map = &anomaly_map(&g, (4, 4)).unwrap()[0];
        let grid = array![[0.0f64, 0.5], [1.0, 1.5]];
        for i in 0..4 {
            for j in 0..4 {
                // half-pixel centre mapping, clamped at the border
                let sy = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let sx = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let want = grid[[0, 0]] * (1.0 - sy) * (1.0 - sx)
                    + grid[[0, 1]] * (1.0 - sy) * sx
                    + grid[[1, 0]] * sy * (1.0 - sx)
                    + grid[[1, 1]] * sy * sx;
                assert!((map.values[[i, j]] as f64 - want).abs() < 1e-6, "({i},{j})");
            }
        }
        assert_eq!(map.source_grid, (2, 2));
    }

    #[test]
    fn score_examples() {
        let c = AnomalyMap {
            values: Array2::from_elem((10, 10), 0.37),
            source_grid: (1, 1),
        };
        assert!((image_score(&c, 0.01) - 0.37f32 as f64).abs() < 1e-12);
        let mut v = Array2::zeros((100, 100));
        for i in 0..100 {
            v[[i, (i * 37) % 100]] = 1.0;
        }
        let spikes = AnomalyMap {
            values: v,
            source_grid: (1, 1),
        };
        assert_eq!(image_score(&spikes, 0.01), 1.0);
        // tiny maps still use one pixel
        let tiny = AnomalyMap {
            values: array![[0.1f32, 0.9]],
            source_grid: (1, 2),
        };
        assert!((image_score(&tiny, 0.01) - 0.9f32 as f64).abs() < 1e-12);
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = AnomalyMap {
            values: Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 / 7.0),
            source_grid: (2, 2),
        };
        let path = dir.path().join("m.map");
        write_map(&path, &map).unwrap();
        assert_eq!(read_map(&path).unwrap(), map);
        write_heatmap(&dir.path().join("m.png"), &map).unwrap();
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(colorize(0.0), VIRIDIS[0]);
        assert_eq!(colorize(2.0), VIRIDIS[8]);
        assert_eq!(colorize(5.0), VIRIDIS[8]);
        assert_eq!(colorize(-1.0), VIRIDIS[0]);
    }

    proptest! {
        #[test]
        fn score_matches_sort_oracle(values in prop::collection::vec(0.0f32..2.0, 1..400), frac in 0.001f64..0.5) {
            let n = values.len();
            let map = AnomalyMap { values: Array2::from_shape_vec((1, n), values.clone()).unwrap(), source_grid: (1, 1) };
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
            let want = sorted[..k].iter().map(|&x| x as f64).sum::<f64>() / k as f64;
            prop_assert!((image_score(&map, frac) - want).abs() < 1e-12);
        }

        #[test]
        fn raising_a_pixel_never_lowers_the_score(values in prop::collection::vec(0.0f32..2.0, 1..300), idx in 0usize..300, bump in 0.0f32..1.0) {
            let n = values.len();
            let base = AnomalyMap { values: Array2::from_shape_vec((1, n), values).unwrap(), source_grid: (1, 1) };
            let mut raised = base.clone();
            raised.values[[0, idx % n]] += bump;
            prop_assert!(image_score(&raised, 0.01) >= image_score(&base, 0.01));
        }

        #[test]
        fn map_is_bounded_by_token_extremes(dists in prop::collection::vec(0.0f64..2.0, 9)) {
            let e = Array3::from_shape_fn((1, 9, 2), |(_, _, c)| [1.0, 0.0][c]);
            let d = Array3::from_shape_fn((1, 9, 2), |(_, t, c)| {
                let a = (1.0 - dists[t]).clamp(-1.0, 1.0).acos();
                [a.cos(), a.sin()][c]
            });
            let g = GroupedFeatures::new(vec![(grid_from(e, 3, 3), grid_from(d, 3, 3))]).unwrap();
            let map = &anomaly_map(&g, (16, 16)).unwrap()[0];
            let hi = dists.iter().cloned().fold(0.0, f64::max);
            prop_assert!(map.values.iter().all(|&v| (v as f64) <= hi + 1e-6 && v >= 0.0));
        }
    }
}
