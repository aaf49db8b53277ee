//! Hard-mining global cosine objective.
//!
//! Each encoder/decoder pair is compared as one flattened vector per image.
//! The `k%` best reconstructed feature points of the batch (smallest per-point
//! cosine distance) keep their forward value but pass back only
//! `shrink_factor` of their gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GroupedFeatures;
use crate::tensor::Real;

/// Norm below which a vector counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

static DEGENERATE_COSINE: AtomicU64 = AtomicU64::new(0);

/// How many cosine distances hit the zero-norm convention so far.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINE.load(Ordering::Relaxed)
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`. Returns `1` when either vector has
/// (near) zero norm.
pub fn cosine_distance<F: Real>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> F {
    let (dot, na, nb) = dot_norms(a.iter().copied(), b.iter().copied());
    distance_from_parts(dot, na, nb)
}

fn dot_norms<F: Real>(a: impl Iterator<Item = F>, b: impl Iterator<Item = F>) -> (F, F, F) {
    let (mut dot, mut aa, mut bb) = (F::zero(), F::zero(), F::zero());
    for (x, y) in a.zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

fn distance_from_parts<F: Real>(dot: F, na: F, nb: F) -> F {
    let floor = F::lit(ZERO_NORM);
    if na < floor || nb < floor {
        DEGENERATE_COSINE.fetch_add(1, Ordering::Relaxed);
        return F::one();
    }
    let cos = (dot / (na * nb)).max(-F::one()).min(F::one());
    F::one() - cos
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningPool {
    /// One percentile over every point of every image and every pair.
    Joint,
    /// A separate percentile per encoder/decoder pair.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardMiningConfig {
    /// Final share of points whose gradient is shrunk, in percent.
    pub k_max: f64,
    pub warmup_iters: usize,
    pub shrink_factor: f64,
    pub pool: MiningPool,
}

impl Default for HardMiningConfig {
    fn default() -> Self {
        Self {
            k_max: 90.0,
            warmup_iters: 1000,
            shrink_factor: 0.1,
            pool: MiningPool::Joint,
        }
    }
}

impl HardMiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.k_max) {
            return Err(Error::config(format!("k_max must be a percentage, got {}", self.k_max)));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            return Err(Error::config(format!(
                "shrink factor must lie in (0, 1], got {}",
                self.shrink_factor
            )));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `k_max` over the warm-up, then constant.
pub fn current_k(iteration: usize, cfg: &HardMiningConfig) -> f64 {
    if cfg.warmup_iters == 0 || iteration >= cfg.warmup_iters {
        cfg.k_max
    } else {
        cfg.k_max * iteration as f64 / cfg.warmup_iters as f64
    }
}

/// Number of points a `k` percent selection marks out of `count`.
pub fn shrink_count(count: usize, k: f64) -> usize {
    let raw = k * count as f64 / 100.0;
    ((raw + 1e-9).floor() as usize).min(count)
}

/// Marks the `floor(k% * n)` smallest distances; ties go to the lower index.
pub fn select_shrink_mask<F: Real>(distances: &[F], k: f64) -> Result<Vec<bool>> {
    if distances.is_empty() {
        return Err(Error::input("cannot select hard-mining points from an empty batch"));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::input("per-point distances must be finite"));
    }
    let take = shrink_count(distances.len(), k);
    let mut mask = vec![false; distances.len()];
    if take == 0 {
        return Ok(mask);
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        distances[*a]
            .partial_cmp(&distances[*b])
            .expect("finite")
            .then(a.cmp(b))
    };
    if take < order.len() {
        order.select_nth_unstable_by(take - 1, cmp);
    }
    for &i in &order[..take] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Per-point cosine distances of one pair, shaped `(batch, tokens)`.
pub fn point_distances<F: Real>(encoder: &Array3<F>, decoder: &Array3<F>) -> Array2<F> {
    let (b, n, _) = encoder.dim();
    Array2::from_shape_fn((b, n), |(i, t)| {
        cosine_distance(
            encoder.index_axis(Axis(0), i).row(t),
            decoder.index_axis(Axis(0), i).row(t),
        )
    })
}

/// Unmined global cosine loss: mean over pairs and images of the cosine
/// distance between flattened feature maps.
pub fn global_cosine_loss<F: Real>(groups: &GroupedFeatures<F>) -> Result<F> {
    let mut total = F::zero();
    let mut terms = 0usize;
    for (e, d) in &groups.pairs {
        for (ei, di) in e.data().outer_iter().zip(d.data().outer_iter()) {
            let (dot, na, nb) = dot_norms(ei.iter().copied(), di.iter().copied());
            total += distance_from_parts(dot, na, nb);
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(Error::input("no feature pairs to compare"));
    }
    Ok(total / F::from_usize(terms).unwrap())
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub loss: F,
    /// `dL/df_D` for each pair, shaped like the pair's decoder grid.
    pub grads: Vec<Array3<F>>,
    /// Shrink mask per pair, shaped `(batch, tokens)`.
    pub masks: Vec<Array2<bool>>,
    pub k: f64,
    pub shrunk_fraction: f64,
}

/// Hard-mining global cosine loss and its gradient with respect to the
/// decoder side of every pair. Encoder features are treated as constants.
pub fn global_hm_loss<F: Real>(
    groups: &GroupedFeatures<F>,
    iteration: usize,
    cfg: &HardMiningConfig,
) -> Result<LossOutput<F>> {
    cfg.validate()?;
    if groups.pairs.is_empty() {
        return Err(Error::input("no feature pairs to compare"));
    }
    let k = current_k(iteration, cfg);
    let dists: Vec<Array2<F>> = groups
        .pairs
        .iter()
        .map(|(e, d)| point_distances(e.data(), d.data()))
        .collect();
    if dists.iter().any(|d| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical {
            iteration,
            message: "reconstruction produced non-finite distances".to_string(),
        });
    }
    let masks: Vec<Array2<bool>> = match cfg.pool {
        MiningPool::Joint => {
            let pooled: Vec<F> = dists.iter().flat_map(|d| d.iter().copied()).collect();
            let flat = select_shrink_mask(&pooled, k)?;
            let mut offset = 0;
            dists
                .iter()
                .map(|d| {
                    let m = Array2::from_shape_vec(d.raw_dim(), flat[offset..offset + d.len()].to_vec())
                        .expect("shape");
                    offset += d.len();
                    m
                })
                .collect()
        }
        MiningPool::PerPair => dists
            .iter()
            .map(|d| {
                let flat = select_shrink_mask(d.as_slice().expect("contiguous"), k)?;
                Ok(Array2::from_shape_vec(d.raw_dim(), flat).expect("shape"))
            })
            .collect::<Result<_>>()?,
    };

    let batch = groups.pairs[0].0.batch();
    let terms = F::from_usize(groups.pairs.len() * batch).unwrap();
    let shrink = F::lit(cfg.shrink_factor);
    let floor = F::lit(ZERO_NORM);
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(groups.pairs.len());
    for ((e, d), mask) in groups.pairs.iter().zip(&masks) {
        let mut g = Array3::zeros(d.data().raw_dim());
        for (i, (ei, di)) in e.data().outer_iter().zip(d.data().outer_iter()).enumerate() {
            let (dot, na, nb) = dot_norms(ei.iter().copied(), di.iter().copied());
            total += distance_from_parts(dot, na, nb);
            if na < floor || nb < floor {
                continue;
            }
            // d/dd [1 - e.d / (|e||d|)] = -e/(|e||d|) + (e.d) d / (|e||d|^3)
            let inv = F::one() / (na * nb);
            let c = dot * inv / (nb * nb);
            let mut gi = g.index_axis_mut(Axis(0), i);
            for (t, ((mut grow, erow), drow)) in gi
                .outer_iter_mut()
                .zip(ei.outer_iter())
                .zip(di.outer_iter())
                .enumerate()
            {
                let scale = if mask[[i, t]] { shrink } else { F::one() } / terms;
                for ((gv, &ev), &dv) in grow.iter_mut().zip(erow.iter()).zip(drow.iter()) {
                    *gv = (c * dv - inv * ev) * scale;
                }
            }
        }
        grads.push(g);
    }
    let loss = total / terms;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            iteration,
            message: format!("loss is {loss}"),
        });
    }
    let marked: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    let points: usize = masks.iter().map(|m| m.len()).sum();
    Ok(LossOutput {
        loss,
        grads,
        masks,
        k,
        shrunk_fraction: marked as f64 / points as f64,
    })
}
