//! Multi-head spatial attention: Softmax attention, kernelized Linear
//! attention with `phi(x) = elu(x) + 1`, and their neighbour-masked variants.
//!
//! Linear attention is evaluated right-associated, `phi(Q) (phi(K)^T V)`, so
//! its cost grows linearly with the token count. The neighbour-masked linear
//! variant cannot use that reordering and falls back to a dense weight matrix.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::normal_matrix;
use crate::error::{Error, Result};
use crate::tensor::{join, GridShape, Module, Param, ParamSlot, Real, TokenGrid};

/// Smallest admissible Linear-attention normaliser.
pub const NORMALIZER_FLOOR: f64 = 1e-12;

/// Which token mixer a Transformer layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Linear { normalize: bool },
    SoftmaxNeighborMasked { n: usize },
    LinearNeighborMasked { n: usize, normalize: bool },
    ConvMixer { kernel: usize },
}

impl AttentionKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionKind::SoftmaxNeighborMasked { n } | AttentionKind::LinearNeighborMasked { n, .. } => {
                if n == 0 || n % 2 == 0 {
                    return Err(Error::config(format!("neighbour mask size must be odd and >= 1, got {n}")));
                }
            }
            AttentionKind::ConvMixer { kernel } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::config(format!("conv mixer kernel must be odd, got {kernel}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn is_attention(&self) -> bool {
        !matches!(self, AttentionKind::ConvMixer { .. })
    }

    fn mask_size(&self) -> Option<usize> {
        match *self {
            AttentionKind::SoftmaxNeighborMasked { n } | AttentionKind::LinearNeighborMasked { n, .. } => Some(n),
            _ => None,
        }
    }
}

impl Default for AttentionKind {
    fn default() -> Self {
        AttentionKind::Linear { normalize: true }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AttentionKind::Softmax => write!(f, "softmax"),
            AttentionKind::Linear { normalize: true } => write!(f, "linear"),
            AttentionKind::Linear { normalize: false } => write!(f, "linear_unnormalized"),
            AttentionKind::SoftmaxNeighborMasked { n } => write!(f, "softmax_masked({n})"),
            AttentionKind::LinearNeighborMasked { n, normalize: true } => write!(f, "linear_masked({n})"),
            AttentionKind::LinearNeighborMasked { n, normalize: false } => {
                write!(f, "linear_unnormalized_masked({n})")
            }
            AttentionKind::ConvMixer { kernel } => write!(f, "conv({kernel})"),
        }
    }
}

/// Splits `name(arg)` into `(name, Some(arg))`.
pub(crate) fn split_call(s: &str) -> Result<(&str, Option<usize>)> {
    let s = s.trim();
    match s.find('(') {
        None => Ok((s, None)),
        Some(open) => {
            let inner = s[open + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::config(format!("unbalanced parentheses in '{s}'")))?;
            let arg = inner
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("expected an integer argument in '{s}'")))?;
            Ok((s[..open].trim(), Some(arg)))
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = split_call(s)?;
        let need = |arg: Option<usize>| {
            arg.ok_or_else(|| Error::config(format!("'{name}' needs a size argument, e.g. {name}(3)")))
        };
        let kind = match name {
            "softmax" if arg.is_none() => AttentionKind::Softmax,
            "linear" if arg.is_none() => AttentionKind::Linear { normalize: true },
            "linear_unnormalized" if arg.is_none() => AttentionKind::Linear { normalize: false },
            "softmax_masked" => AttentionKind::SoftmaxNeighborMasked { n: need(arg)? },
            "linear_masked" => AttentionKind::LinearNeighborMasked {
                n: need(arg)?,
                normalize: true,
            },
            "linear_unnormalized_masked" => AttentionKind::LinearNeighborMasked {
                n: need(arg)?,
                normalize: false,
            },
            "conv" => AttentionKind::ConvMixer { kernel: need(arg)? },
            _ => {
                return Err(Error::config(format!(
                    "unknown attention '{s}'; expected softmax | linear | linear_unnormalized | \
                     softmax_masked(n) | linear_masked(n) | linear_unnormalized_masked(n) | conv(k)"
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

thread_local! {
    static MIX_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate count of the token-mixing stage (score matrix or
/// key-value summary plus the weighted sum) on this thread since the last reset.
pub fn mixing_flops() -> u64 {
    MIX_FLOPS.with(|c| c.get())
}

pub fn reset_mixing_flops() {
    MIX_FLOPS.with(|c| c.set(0));
}

fn count_flops(n: u64) {
    MIX_FLOPS.with(|c| c.set(c.get() + n));
}

/// `true` marks keys inside the `n x n` square centred on each query.
///
/// Fails when some query would be left without any visible key.
pub fn neighbor_mask_matrix(grid_h: usize, grid_w: usize, n: usize) -> Result<Array2<bool>> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::config(format!("neighbour mask size must be odd and >= 1, got {n}")));
    }
    if n >= 2 * grid_h.max(grid_w) - 1 {
        return Err(Error::config(format!(
            "neighbour mask {n}x{n} hides every key of a {grid_h}x{grid_w} grid"
        )));
    }
    let tokens = grid_h * grid_w;
    let r = (n / 2) as isize;
    let mut mask = Array2::from_elem((tokens, tokens), false);
    for qi in 0..grid_h {
        for qj in 0..grid_w {
            let q = qi * grid_w + qj;
            for ki in 0..grid_h {
                for kj in 0..grid_w {
                    let di = (ki as isize - qi as isize).abs();
                    let dj = (kj as isize - qj as isize).abs();
                    if di <= r && dj <= r {
                        mask[[q, ki * grid_w + kj]] = true;
                    }
                }
            }
            if mask.row(q).iter().all(|&m| m) {
                return Err(Error::config(format!(
                    "neighbour mask {n}x{n} hides every key for query ({qi},{qj}) of a {grid_h}x{grid_w} grid"
                )));
            }
        }
    }
    Ok(mask)
}

/// Sets the logits of masked neighbours to negative infinity.
pub fn neighbor_mask<F: Real>(logits: &Array2<F>, grid_h: usize, grid_w: usize, n: usize) -> Result<Array2<F>> {
    let tokens = grid_h * grid_w;
    if logits.dim() != (tokens, tokens) {
        return Err(Error::config(format!(
            "logits of shape {:?} do not match a {grid_h}x{grid_w} grid",
            logits.dim()
        )));
    }
    let mask = neighbor_mask_matrix(grid_h, grid_w, n)?;
    let mut out = logits.clone();
    Zip::from(&mut out).and(&mask).for_each(|v, &m| {
        if m {
            *v = F::neg_infinity();
        }
    });
    Ok(out)
}

fn phi<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + F::one()
    } else {
        x.exp()
    }
}

fn phi_grad<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        x.exp()
    }
}

fn row_softmax<F: Real>(scores: &mut Array2<F>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

enum HeadCache<F> {
    Softmax {
        probs: Array2<F>,
    },
    Linear {
        phi_q: Array2<F>,
        phi_k: Array2<F>,
        kv: Array2<F>,
        ksum: Array1<F>,
        den: Option<Array1<F>>,
        out: Array2<F>,
    },
    Dense {
        phi_q: Array2<F>,
        phi_k: Array2<F>,
        weights: Array2<F>,
        den: Option<Array1<F>>,
        mask: Array2<bool>,
    },
}

fn softmax_head<F: Real>(
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    mask: Option<&Array2<bool>>,
) -> (Array2<F>, HeadCache<F>) {
    let (n, dh) = q.dim();
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|s| s * scale);
    if let Some(mask) = mask {
        Zip::from(&mut scores).and(mask).for_each(|s, &m| {
            if m {
                *s = F::neg_infinity();
            }
        });
    }
    row_softmax(&mut scores);
    let out = scores.dot(&v);
    count_flops(2 * (n * n * dh) as u64);
    (out, HeadCache::Softmax { probs: scores })
}

fn linear_head<F: Real>(
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    normalize: bool,
) -> (Array2<F>, HeadCache<F>) {
    let (n, dh) = q.dim();
    let phi_q = q.mapv(phi);
    let phi_k = k.mapv(phi);
    let kv = phi_k.t().dot(&v);
    let mut out = phi_q.dot(&kv);
    count_flops(2 * (n * dh * dh) as u64);
    let ksum = phi_k.sum_axis(Axis(0));
    let den = if normalize {
        let floor = F::lit(NORMALIZER_FLOOR);
        let den = phi_q.dot(&ksum).mapv(|d| d.max(floor));
        count_flops((n * dh) as u64);
        for (mut row, &d) in out.rows_mut().into_iter().zip(den.iter()) {
            row.mapv_inplace(|x| x / d);
        }
        Some(den)
    } else {
        None
    };
    let cache = HeadCache::Linear {
        phi_q,
        phi_k,
        kv,
        ksum,
        den,
        out: out.clone(),
    };
    (out, cache)
}

/// Linear attention with an explicit (masked) weight matrix.
fn dense_linear_head<F: Real>(
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    normalize: bool,
    mask: &Array2<bool>,
) -> (Array2<F>, HeadCache<F>) {
    let (n, dh) = q.dim();
    let phi_q = q.mapv(phi);
    let phi_k = k.mapv(phi);
    let mut weights = phi_q.dot(&phi_k.t());
    Zip::from(&mut weights).and(mask).for_each(|w, &m| {
        if m {
            *w = F::zero();
        }
    });
    let den = if normalize {
        let floor = F::lit(NORMALIZER_FLOOR);
        let den = weights.sum_axis(Axis(1)).mapv(|d| d.max(floor));
        for (mut row, &d) in weights.rows_mut().into_iter().zip(den.iter()) {
            row.mapv_inplace(|x| x / d);
        }
        Some(den)
    } else {
        None
    };
    let out = weights.dot(&v);
    count_flops(2 * (n * n * dh) as u64);
    let cache = HeadCache::Dense {
        phi_q,
        phi_k,
        weights,
        den,
        mask: mask.clone(),
    };
    (out, cache)
}

/// Returns `(dq, dk, dv)` for one head.
fn head_backward<F: Real>(
    cache: &HeadCache<F>,
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    dout: ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    match cache {
        HeadCache::Softmax { probs } => {
            let dh = q.ncols();
            let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
            let dv = probs.t().dot(&dout);
            let mut ds = dout.dot(&v.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                let inner: F = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - inner) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            (dq, dk, dv)
        }
        HeadCache::Linear {
            phi_q,
            phi_k,
            kv,
            ksum,
            den,
            out,
        } => {
            let (dphi_q, dkv, dksum) = match den {
                Some(den) => {
                    let mut dnum = dout.to_owned();
                    let mut dden = Array1::zeros(den.len());
                    for (((mut row, orow), &d), dd) in dnum
                        .rows_mut()
                        .into_iter()
                        .zip(out.rows())
                        .zip(den.iter())
                        .zip(dden.iter_mut())
                    {
                        let dot: F = row.iter().zip(orow.iter()).map(|(&a, &b)| a * b).sum();
                        *dd = -dot / d;
                        row.mapv_inplace(|x| x / d);
                    }
                    let mut dphi_q = dnum.dot(&kv.t());
                    for (mut row, &dd) in dphi_q.rows_mut().into_iter().zip(dden.iter()) {
                        row.scaled_add(dd, ksum);
                    }
                    let dkv = phi_q.t().dot(&dnum);
                    let dksum = phi_q.t().dot(&dden);
                    (dphi_q, dkv, Some(dksum))
                }
                None => (dout.dot(&kv.t()), phi_q.t().dot(&dout), None),
            };
            let mut dphi_k = v.dot(&dkv.t());
            if let Some(dksum) = dksum {
                dphi_k += &dksum;
            }
            let dv = phi_k.dot(&dkv);
            let dq = &dphi_q * &q.mapv(phi_grad);
            let dk = &dphi_k * &k.mapv(phi_grad);
            (dq, dk, dv)
        }
        HeadCache::Dense {
            phi_q,
            phi_k,
            weights,
            den,
            mask,
        } => {
            let dv = weights.t().dot(&dout);
            let mut dw = dout.dot(&v.t());
            if let Some(den) = den {
                for ((mut drow, wrow), &d) in dw.rows_mut().into_iter().zip(weights.rows()).zip(den.iter()) {
                    let inner: F = drow.iter().zip(wrow.iter()).map(|(&a, &b)| a * b).sum();
                    drow.mapv_inplace(|x| (x - inner) / d);
                }
            }
            Zip::from(&mut dw).and(mask).for_each(|g, &m| {
                if m {
                    *g = F::zero();
                }
            });
            let dphi_q = dw.dot(phi_k);
            let dphi_k = dw.t().dot(phi_q);
            let dq = &dphi_q * &q.mapv(phi_grad);
            let dk = &dphi_k * &k.mapv(phi_grad);
            (dq, dk, dv)
        }
    }
}

/// Projection weights of a multi-head attention sublayer. Matrices are
/// `(d, d)` and applied on the right of row-major tokens.
#[derive(Debug, Clone)]
pub struct AttentionParams<F: Real> {
    pub w_q: Param<F, ndarray::Ix2>,
    pub w_k: Param<F, ndarray::Ix2>,
    pub w_v: Param<F, ndarray::Ix2>,
    pub w_out: Param<F, ndarray::Ix2>,
    pub num_heads: usize,
}

pub struct AttentionCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    mixed: Array2<F>,
    heads: Vec<HeadCache<F>>,
    shape: GridShape,
}

impl<F: Real> AttentionParams<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, num_heads: usize, std: f64) -> Result<Self> {
        let p = Self {
            w_q: Param::new(normal_matrix(rng, dim, dim, std)),
            w_k: Param::new(normal_matrix(rng, dim, dim, std)),
            w_v: Param::new(normal_matrix(rng, dim, dim, std)),
            w_out: Param::new(normal_matrix(rng, dim, dim, std)),
            num_heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_matrices(
        w_q: Array2<F>,
        w_k: Array2<F>,
        w_v: Array2<F>,
        w_out: Array2<F>,
        num_heads: usize,
    ) -> Result<Self> {
        let p = Self {
            w_q: Param::new(w_q),
            w_k: Param::new(w_k),
            w_v: Param::new(w_v),
            w_out: Param::new(w_out),
            num_heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w_q.value.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, w) in [
            ("w_q", &self.w_q.value),
            ("w_k", &self.w_k.value),
            ("w_v", &self.w_v.value),
            ("w_out", &self.w_out.value),
        ] {
            if w.dim() != (d, d) {
                return Err(Error::config(format!("{name} must be {d}x{d}, got {:?}", w.dim())));
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::config(format!("{name} contains non-finite entries")));
            }
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide model width {d}",
                self.num_heads
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<'_, F>, shape: GridShape) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::config(format!(
                "input width {} does not match attention width {}",
                x.ncols(),
                self.dim()
            )));
        }
        if x.nrows() != shape.rows() {
            return Err(Error::config("input rows do not match the grid shape"));
        }
        if self.num_heads == 0 || self.dim() % self.num_heads != 0 {
            return Err(Error::config("head count does not divide model width"));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::input("attention input contains NaN or infinite values"));
        }
        Ok(())
    }

    /// Full attention sublayer: projections, per-head mixing, output projection.
    pub fn forward(
        &self,
        kind: AttentionKind,
        x: ArrayView2<'_, F>,
        shape: GridShape,
    ) -> Result<(Array2<F>, AttentionCache<F>)> {
        self.check_input(x, shape)?;
        if !kind.is_attention() {
            return Err(Error::config("conv mixer is not an attention kind"));
        }
        let mask = match kind.mask_size() {
            Some(n) => Some(neighbor_mask_matrix(shape.grid_h, shape.grid_w, n)?),
            None => None,
        };
        let q = x.dot(&self.w_q.value);
        let k = x.dot(&self.w_k.value);
        let v = x.dot(&self.w_v.value);
        let d = self.dim();
        let dh = d / self.num_heads;
        let n = shape.tokens();
        let mut mixed = Array2::zeros((shape.rows(), d));
        let mut heads = Vec::with_capacity(shape.batch * self.num_heads);
        for b in 0..shape.batch {
            for h in 0..self.num_heads {
                let rs = s![b * n..(b + 1) * n, h * dh..(h + 1) * dh];
                let (qh, kh, vh) = (q.slice(rs), k.slice(rs), v.slice(rs));
                let (out, cache) = match kind {
                    AttentionKind::Softmax => softmax_head(qh, kh, vh, None),
                    AttentionKind::SoftmaxNeighborMasked { .. } => softmax_head(qh, kh, vh, mask.as_ref()),
                    AttentionKind::Linear { normalize } => linear_head(qh, kh, vh, normalize),
                    AttentionKind::LinearNeighborMasked { normalize, .. } => {
                        dense_linear_head(qh, kh, vh, normalize, mask.as_ref().expect("mask built"))
                    }
                    AttentionKind::ConvMixer { .. } => unreachable!(),
                };
                mixed.slice_mut(rs).assign(&out);
                heads.push(cache);
            }
        }
        let y = mixed.dot(&self.w_out.value);
        let cache = AttentionCache {
            x: x.to_owned(),
            q,
            k,
            v,
            mixed,
            heads,
            shape,
        };
        Ok((y, cache))
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let shape = cache.shape;
        let d = self.dim();
        let dh = d / self.num_heads;
        let n = shape.tokens();
        ndarray::linalg::general_mat_mul(F::one(), &cache.mixed.t(), &dy, F::one(), &mut self.w_out.grad);
        let dmixed = dy.dot(&self.w_out.value.t());
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let mut idx = 0;
        for b in 0..shape.batch {
            for h in 0..self.num_heads {
                let rs = s![b * n..(b + 1) * n, h * dh..(h + 1) * dh];
                let (gq, gk, gv) = head_backward(
                    &cache.heads[idx],
                    cache.q.slice(rs),
                    cache.k.slice(rs),
                    cache.v.slice(rs),
                    dmixed.slice(rs),
                );
                dq.slice_mut(rs).assign(&gq);
                dk.slice_mut(rs).assign(&gk);
                dv.slice_mut(rs).assign(&gv);
                idx += 1;
            }
        }
        let xt = cache.x.t();
        ndarray::linalg::general_mat_mul(F::one(), &xt, &dq, F::one(), &mut self.w_q.grad);
        ndarray::linalg::general_mat_mul(F::one(), &xt, &dk, F::one(), &mut self.w_k.grad);
        ndarray::linalg::general_mat_mul(F::one(), &xt, &dv, F::one(), &mut self.w_v.grad);
        let mut dx = dq.dot(&self.w_q.value.t());
        ndarray::linalg::general_mat_mul(F::one(), &dk, &self.w_k.value.t(), F::one(), &mut dx);
        ndarray::linalg::general_mat_mul(F::one(), &dv, &self.w_v.value.t(), F::one(), &mut dx);
        dx
    }

    /// Dense per-head weight matrices (rows sum to one for Softmax and
    /// normalized Linear attention), ordered batch-major then head.
    pub fn attention_weights(
        &self,
        kind: AttentionKind,
        x: ArrayView2<'_, F>,
        shape: GridShape,
    ) -> Result<Vec<Array2<F>>> {
        self.check_input(x, shape)?;
        let mask = match kind.mask_size() {
            Some(n) => Some(neighbor_mask_matrix(shape.grid_h, shape.grid_w, n)?),
            None => None,
        };
        let q = x.dot(&self.w_q.value);
        let k = x.dot(&self.w_k.value);
        let d = self.dim();
        let dh = d / self.num_heads;
        let n = shape.tokens();
        let mut out = Vec::new();
        for b in 0..shape.batch {
            for h in 0..self.num_heads {
                let rs = s![b * n..(b + 1) * n, h * dh..(h + 1) * dh];
                let (qh, kh) = (q.slice(rs), k.slice(rs));
                let w = match kind {
                    AttentionKind::Softmax | AttentionKind::SoftmaxNeighborMasked { .. } => {
                        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                        let mut sc = qh.dot(&kh.t()).mapv(|v| v * scale);
                        if let Some(m) = &mask {
                            Zip::from(&mut sc).and(m).for_each(|s, &m| {
                                if m {
                                    *s = F::neg_infinity();
                                }
                            });
                        }
                        row_softmax(&mut sc);
                        sc
                    }
                    AttentionKind::Linear { normalize } | AttentionKind::LinearNeighborMasked { normalize, .. } => {
                        let mut w = qh.mapv(phi).dot(&kh.mapv(phi).t());
                        if let Some(m) = &mask {
                            Zip::from(&mut w).and(m).for_each(|v, &m| {
                                if m {
                                    *v = F::zero();
                                }
                            });
                        }
                        if normalize {
                            let floor = F::lit(NORMALIZER_FLOOR);
                            for mut row in w.rows_mut() {
                                let z = row.sum().max(floor);
                                row.mapv_inplace(|v| v / z);
                            }
                        }
                        w
                    }
                    AttentionKind::ConvMixer { .. } => {
                        return Err(Error::config("conv mixer has no attention weights"))
                    }
                };
                out.push(w);
            }
        }
        Ok(out)
    }
}

impl<F: Real> Module<F> for AttentionParams<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        f(&join(prefix, "w_q"), self.w_q.slot());
        f(&join(prefix, "w_k"), self.w_k.slot());
        f(&join(prefix, "w_v"), self.w_v.slot());
        f(&join(prefix, "w_out"), self.w_out.slot());
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&join(prefix, "w_q"), self.w_q.value.view().into_dyn());
        f(&join(prefix, "w_k"), self.w_k.value.view().into_dyn());
        f(&join(prefix, "w_v"), self.w_v.value.view().into_dyn());
        f(&join(prefix, "w_out"), self.w_out.value.view().into_dyn());
    }
}

/// Multi-head Softmax attention `softmax(Q K^T / sqrt(d_head)) V`, followed
/// by the output projection.
pub fn softmax_attention<F: Real>(x: &TokenGrid<F>, p: &AttentionParams<F>) -> Result<TokenGrid<F>> {
    let (y, _) = p.forward(AttentionKind::Softmax, x.rows(), x.shape())?;
    TokenGrid::from_rows(y, x.shape())
}

/// Multi-head Linear attention `phi(Q) (phi(K)^T V)`, followed by the output
/// projection. With `normalize`, every row is divided by `phi(q_i) . sum_j phi(k_j)`.
pub fn linear_attention<F: Real>(x: &TokenGrid<F>, p: &AttentionParams<F>, normalize: bool) -> Result<TokenGrid<F>> {
    let (y, _) = p.forward(AttentionKind::Linear { normalize }, x.rows(), x.shape())?;
    TokenGrid::from_rows(y, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Array2<f64> {
        Array2::eye(d)
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "softmax",
            "linear",
            "linear_unnormalized",
            "softmax_masked(3)",
            "linear_masked(5)",
            "conv(7)",
        ] {
            let k: AttentionKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("linear_masked(4)".parse::<AttentionKind>().is_err());
        assert!("conv".parse::<AttentionKind>().is_err());
        assert!("cosine".parse::<AttentionKind>().is_err());
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let p = AttentionParams::<f64>::from_matrices(
            normal_matrix(&mut rng, d, d, 1.0),
            normal_matrix(&mut rng, d, d, 1.0),
            normal_matrix(&mut rng, d, d, 1.0),
            identity(d),
            2,
        )
        .unwrap();
        let x = TokenGrid::from_rows(normal_matrix(&mut rng, 1, d, 1.0), GridShape::new(1, 1, 1)).unwrap();
        let expected = x.rows().dot(&p.w_v.value);
        for y in [softmax_attention(&x, &p).unwrap(), linear_attention(&x, &p, true).unwrap()] {
            let diff = (&y.to_rows() - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::<f64>::new(&mut rng, 4, 1, 0.5).unwrap();
        let mut rows = normal_matrix(&mut rng, 4, 4, 1.0);
        rows[[2, 1]] = f64::NAN;
        let x = TokenGrid::from_rows(rows, GridShape::new(1, 2, 2)).unwrap();
        assert!(matches!(softmax_attention(&x, &p), Err(Error::Input(_))));
    }

    #[test]
    fn mismatched_width_is_a_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::<f64>::new(&mut rng, 4, 1, 0.5).unwrap();
        let x = TokenGrid::from_rows(normal_matrix(&mut rng, 4, 6, 1.0), GridShape::new(1, 2, 2)).unwrap();
        assert!(matches!(linear_attention(&x, &p, true), Err(Error::Config(_))));
        assert!(AttentionParams::<f64>::new(&mut rng, 6, 4, 0.5).is_err());
    }

    #[test]
    fn neighbor_mask_diagonal_for_unit_square() {
        let m = neighbor_mask_matrix(3, 4, 1).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(m[[i, j]], i == j);
            }
        }
    }

    #[test]
    fn neighbor_mask_corner_count() {
        let m = neighbor_mask_matrix(4, 4, 3).unwrap();
        // enumerate the 3x3 square around (0,0) clipped to the grid
        let mut expected = 0;
        for di in -1i32..=1 {
            for dj in -1i32..=1 {
                if di >= 0 && dj >= 0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 4);
        assert_eq!(m.row(0).iter().filter(|&&v| v).count(), expected);
    }

    #[test]
    fn neighbor_mask_full_row_is_rejected() {
        assert!(matches!(neighbor_mask_matrix(3, 3, 3), Err(Error::Config(_))));
        assert!(neighbor_mask_matrix(4, 4, 7).is_err());
        assert!(neighbor_mask_matrix(4, 4, 2).is_err());
        let logits = Array2::<f64>::zeros((9, 9));
        assert!(neighbor_mask(&logits, 3, 3, 3).is_err());
        let masked = neighbor_mask(&Array2::<f64>::zeros((16, 16)), 4, 4, 1).unwrap();
        assert!(masked[[5, 5]].is_infinite() && masked[[5, 6]] == 0.0);
    }

    fn numeric_input_grad(
        p: &AttentionParams<f64>,
        kind: AttentionKind,
        x: &Array2<f64>,
        shape: GridShape,
        probe: &Array2<f64>,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fp = (p.forward(kind, xp.view(), shape).unwrap().0 * probe).sum();
            let fm = (p.forward(kind, xm.view(), shape).unwrap().0 * probe).sum();
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn backward_matches_finite_differences_for_every_kind() {
        let shape = GridShape::new(2, 3, 4);
        for kind in [
            AttentionKind::Softmax,
            AttentionKind::Linear { normalize: true },
            AttentionKind::Linear { normalize: false },
            AttentionKind::SoftmaxNeighborMasked { n: 1 },
            AttentionKind::LinearNeighborMasked { n: 3, normalize: true },
            AttentionKind::LinearNeighborMasked { n: 1, normalize: false },
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = AttentionParams::<f64>::new(&mut rng, 4, 2, 0.6).unwrap();
            let x = normal_matrix(&mut rng, shape.rows(), 4, 1.0);
            let probe = normal_matrix(&mut rng, shape.rows(), 4, 1.0);
            let (_, cache) = p.forward(kind, x.view(), shape).unwrap();
            let mut p2 = p.clone();
            let dx = p2.backward(&cache, probe.view());
            let fd = numeric_input_grad(&p, kind, &x, shape, &probe);
            let scale = fd.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
            let err = (&dx - &fd).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) / scale;
            assert!(err < 1e-5, "{kind}: rel err {err}");

            // weight gradient of w_k, spot-checked on a few coordinates
            for &(i, j) in &[(0usize, 1usize), (3, 2), (2, 0)] {
                let h = 1e-6;
                let mut pp = p.clone();
                pp.w_k.value[[i, j]] += h;
                let mut pm = p.clone();
                pm.w_k.value[[i, j]] -= h;
                let fp = (pp.forward(kind, x.view(), shape).unwrap().0 * &probe).sum();
                let fm = (pm.forward(kind, x.view(), shape).unwrap().0 * &probe).sum();
                let num = (fp - fm) / (2.0 * h);
                assert!((num - p2.w_k.grad[[i, j]]).abs() < 1e-5 * num.abs().max(1.0), "{kind}");
            }
        }
    }

    #[test]
    fn flop_counts_scale_as_expected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::<f32>::new(&mut rng, 16, 1, 0.2).unwrap();
        let count = |kind: AttentionKind, h: usize| {
            let shape = GridShape::new(1, h, 8);
            let x: Array2<f32> = normal_matrix(&mut ChaCha8Rng::seed_from_u64(0), shape.rows(), 16, 1.0);
            reset_mixing_flops();
            p.forward(kind, x.view(), shape).unwrap();
            mixing_flops()
        };
        let s1 = count(AttentionKind::Softmax, 4);
        let s2 = count(AttentionKind::Softmax, 8);
        let l1 = count(AttentionKind::Linear { normalize: true }, 4);
        let l2 = count(AttentionKind::Linear { normalize: true }, 8);
        assert_eq!(s2, 4 * s1);
        assert_eq!(l2, 2 * l1);
    }
}
