//! Bilinear resampling with half-pixel centres (corners not aligned), shared
//! by image preprocessing and anomaly-map upsampling.

use ndarray::{Array2, ArrayView2};

use crate::tensor::Real;

/// Source coordinate for each output index along one axis, as
/// `(lower, upper, upper_weight)`.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resizes `src` to `(out_h, out_w)`. Each output is a convex combination of
/// at most four source values, computed in `f64`.
pub fn resize_bilinear<F: Real>(src: ArrayView2<'_, F>, out_h: usize, out_w: usize) -> Array2<F> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "resize of an empty array");
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, wr) = rows[i];
        let (c0, c1, wc) = cols[j];
        let at = |r: usize, c: usize| src[[r, c]].to_f64().unwrap();
        let top = at(r0, c0) * (1.0 - wc) + at(r0, c1) * wc;
        let bottom = at(r1, c0) * (1.0 - wc) + at(r1, c1) * wc;
        F::lit(top * (1.0 - wr) + bottom * wr)
    })
}

/// Nearest-neighbour resize using the same half-pixel convention, for
/// binary masks.
pub fn resize_nearest<T: Copy>(src: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let pick = |i: usize, input: usize, output: usize| {
        (((i as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| src[[pick(i, h, out_h), pick(j, w, out_w)]])
}
